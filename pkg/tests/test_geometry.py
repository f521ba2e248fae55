import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigsim.errors import InputError, NumericalError
from rigsim.geometry import (
    Camera,
    Embedding,
    ProjectionError,
    SurfaceMesh,
    TetMesh,
    bary_eval,
    box_surface,
    build_lattice_tet,
    embed_pixels,
    embed_surface_in_tet,
    load_surface_mesh,
    project,
    read_tetmesh,
    write_face_colors,
    write_obj,
    write_tetmesh,
)


# ---------------------------------------------------------------- project

def test_project_on_axis(front_camera):
    uv, z = project(front_camera, [0.0, 0.0, 1.0])
    np.testing.assert_allclose(uv, [128.0, 128.0])
    assert z == 1.0


def test_project_pinhole_formula(front_camera):
    uv, z = project(front_camera, [0.5, 0.0, 1.0])
    np.testing.assert_allclose(uv, [178.0, 128.0])
    assert z == 1.0


def test_project_rejects_point_on_camera_plane(front_camera):
    with pytest.raises(ProjectionError) as info:
        project(front_camera, [[0.0, 0.0, 1.0], [0.1, 0.0, 0.0]])
    assert info.value.index == 1
    assert isinstance(info.value, NumericalError)


def test_camera_validation():
    with pytest.raises(InputError):
        Camera(0.0, 1.0, 0, 0, 8, 8)
    bad = np.hstack([2 * np.eye(3), np.zeros((3, 1))])
    with pytest.raises(InputError):
        Camera(1.0, 1.0, 0, 0, 8, 8, bad)


def test_camera_config_round_trip(small_camera):
    cam = Camera.from_config(small_camera.to_config())
    np.testing.assert_array_equal(cam.extrinsic, small_camera.extrinsic)
    assert (cam.fx, cam.cx, cam.width) == (small_camera.fx, small_camera.cx, small_camera.width)


# ---------------------------------------------------------------- meshes

def test_surface_mesh_rejects_degenerate_face():
    V = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(InputError, match="degenerate"):
        SurfaceMesh(V, [[0, 1, 2]])


def test_surface_mesh_rejects_bad_index():
    V = np.eye(3)
    with pytest.raises(InputError):
        SurfaceMesh(V, [[0, 1, 3]])


def test_tet_mesh_rejects_inverted_tet():
    V = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    TetMesh(V, [[0, 1, 2, 3]])
    with pytest.raises(InputError, match="oriented"):
        TetMesh(V, [[0, 2, 1, 3]])


@pytest.mark.parametrize("scheme,per_cell", [("six", 6), ("five", 5)])
def test_lattice_unit_cube(scheme, per_cell):
    tet = build_lattice_tet([0, 0, 0], [1, 1, 1], 1, scheme=scheme)
    assert tet.n_tets == per_cell
    assert abs(tet.rest_volumes.sum() - 1.0) < 1e-9


@pytest.mark.parametrize("scheme,per_cell", [("six", 6), ("five", 5)])
def test_lattice_resolution_two(scheme, per_cell):
    tet = build_lattice_tet([0, 0, 0], [1, 1, 1], 2, scheme=scheme)
    assert tet.n_tets == 8 * per_cell
    vol = np.linalg.det(tet.shape_matrices(tet.vertices)) / 6.0
    assert np.all(vol > 0)
    np.testing.assert_allclose(vol, tet.rest_volumes, rtol=1e-9)


def test_lattice_rejects_empty_box():
    with pytest.raises(InputError):
        build_lattice_tet([0, 0, 0], [1, 0, 1], 2)
    with pytest.raises(InputError):
        build_lattice_tet([0, 0, 0], [1, 1, 1], 0)


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.integers(1, 3)] * 3),
       st.tuples(*[st.floats(0.1, 3.0)] * 3),
       st.sampled_from(["five", "six"]))
def test_lattice_volume_conservation(res, size, scheme):
    tet = build_lattice_tet([0, 0, 0], size, res, scheme=scheme)
    assert np.all(tet.rest_volumes > 0)
    assert abs(tet.rest_volumes.sum() - np.prod(size)) < 1e-9 * np.prod(size)


def test_box_surface_is_closed():
    mesh = box_surface([0, 0, 0], [1, 2, 3], (2, 2, 2))
    edges = np.sort(np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)


# ---------------------------------------------------------------- embeddings

def test_embedding_validation():
    with pytest.raises(InputError):
        Embedding([0], [[0.5, 0.6, -0.1]])
    with pytest.raises(InputError):
        Embedding([0], [[0.5, 0.6, 0.1]])


def test_embed_pixels_vertex_hit(front_camera, triangle_mesh):
    V = triangle_mesh.vertices
    uv, _ = project(front_camera, V[2])
    emb, kept, dropped = embed_pixels(front_camera, uv[None], triangle_mesh, V)
    assert kept.tolist() == [0] and dropped.size == 0
    # face [0, 2, 1]: vertex 2 is the second corner
    assert abs(emb.bary[0, 1] - 1.0) < 1e-6


def test_embed_pixels_centroid(front_camera, triangle_mesh):
    V = triangle_mesh.vertices
    uv, _ = project(front_camera, V.mean(axis=0))
    emb, _, _ = embed_pixels(front_camera, uv[None], triangle_mesh, V)
    np.testing.assert_allclose(emb.bary[0], [1 / 3] * 3, atol=1e-6)


def test_embed_pixels_drops_misses(front_camera, triangle_mesh):
    V = triangle_mesh.vertices
    centre, _ = project(front_camera, V.mean(axis=0))
    pixels = np.array([centre, [2.0, 2.0]])
    emb, kept, dropped = embed_pixels(front_camera, pixels, triangle_mesh, V)
    assert kept.tolist() == [0] and dropped.tolist() == [1]
    with pytest.raises(InputError, match="no foreground"):
        embed_pixels(front_camera, [[2.0, 2.0]], triangle_mesh, V)


def test_embed_pixels_picks_nearest_face(front_camera):
    near = np.array([[-0.5, -0.5, 2.0], [0.0, 0.5, 2.0], [0.5, -0.5, 2.0]])
    far = near + [0, 0, 1.0]
    mesh = SurfaceMesh(np.vstack([far, near]), [[0, 1, 2], [3, 4, 5]])
    emb, _, _ = embed_pixels(front_camera, [[128.0, 120.0]], mesh, mesh.vertices)
    assert emb.host_index[0] == 1


def test_project_embed_round_trip(small_camera):
    mesh = box_surface([-0.5, -0.4, -0.3], [0.5, 0.4, 0.3], (3, 3, 2))
    rng = np.random.default_rng(3)
    pixels = rng.uniform(10, 22, (50, 2))
    emb, kept, _ = embed_pixels(small_camera, pixels, mesh, mesh.vertices)
    uv, _ = project(small_camera, bary_eval(emb, mesh.vertices, mesh.faces))
    assert np.abs(uv - pixels[kept]).max() < 0.5


def test_embed_surface_vertex_at_tet_vertex():
    tet = build_lattice_tet([0, 0, 0], [1, 1, 1], 1)
    emb = embed_surface_in_tet(tet.vertices[tet.tets[0, 2]][None], tet)
    assert abs(emb.bary[0].max() - 1.0) < 1e-9
    corner = tet.tets[emb.host_index[0], emb.bary[0].argmax()]
    np.testing.assert_allclose(tet.vertices[corner], tet.vertices[tet.tets[0, 2]])


def test_embed_surface_centroid():
    tet = build_lattice_tet([0, 0, 0], [1, 1, 1], 1)
    emb = embed_surface_in_tet(tet.centroids()[3][None], tet)
    assert emb.host_index[0] == 3
    np.testing.assert_allclose(emb.bary[0], 0.25, atol=1e-9)


def _brute_force_closest(p, tet):
    """Closest point on the union of tets by dense sampling-free projection per tet face."""
    from rigsim.geometry import closest_point_on_triangles

    local = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
    tris = tet.vertices[tet.tets[:, local]].reshape(-1, 3, 3)
    q, _ = closest_point_on_triangles(np.repeat(p[None], len(tris), 0), tris[:, 0], tris[:, 1], tris[:, 2])
    return q[np.argmin(((q - p) ** 2).sum(1))]


def test_embed_surface_outside_hull():
    tet = build_lattice_tet([0, 0, 0], [1, 0.5, 0.5], (2, 1, 1))
    rng = np.random.default_rng(0)
    pts = rng.uniform([-0.5, -0.5, -0.5], [1.5, 1.0, 1.0], (40, 3))
    pts = pts[np.any((pts < [0, 0, 0]) | (pts > [1, 0.5, 0.5]), axis=1)]
    emb = embed_surface_in_tet(pts, tet)
    np.testing.assert_allclose(emb.bary.sum(1), 1.0, atol=1e-12)
    got = bary_eval(emb, tet.vertices, tet.tets)
    for p, g in zip(pts, got):
        np.testing.assert_allclose(g, _brute_force_closest(p, tet), atol=1e-6)


# ---------------------------------------------------------------- bary_eval

def test_bary_eval_identity_and_translation():
    mesh = box_surface([0, 0, 0], [1, 1, 1], (2, 2, 2))
    tet = build_lattice_tet([0.05, 0.05, 0.05], [0.95, 0.95, 0.95], 2)
    emb = embed_surface_in_tet(mesh, tet)
    p0 = bary_eval(emb, tet.vertices, tet.tets)
    inside = np.all((mesh.vertices > 0.05) & (mesh.vertices < 0.95), axis=1)
    np.testing.assert_allclose(p0[inside], mesh.vertices[inside], atol=1e-6)
    d = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(bary_eval(emb, tet.vertices + d, tet.tets), p0 + d, atol=1e-12)


def test_bary_eval_matches_explicit_sum():
    rng = np.random.default_rng(5)
    topo = rng.integers(0, 10, (6, 3))
    V = rng.normal(size=(10, 3))
    w = rng.dirichlet(np.ones(3), 15)
    emb = Embedding(rng.integers(0, 6, 15), w)
    got = bary_eval(emb, V, topo)
    want = np.array([sum(w[i, k] * V[topo[emb.host_index[i], k]] for k in range(3)) for i in range(15)])
    np.testing.assert_allclose(got, want, atol=1e-12)
    np.testing.assert_allclose(emb.matrix(topo, 10) @ V, want, atol=1e-12)


def test_bary_eval_index_out_of_range():
    emb = Embedding([5], [[1.0, 0.0, 0.0]])
    with pytest.raises(InputError):
        bary_eval(emb, np.zeros((3, 3)), [[0, 1, 2]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5), st.floats(-5, 5))
def test_bary_eval_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    topo = rng.integers(0, 8, (5, 4))
    emb = Embedding(rng.integers(0, 5, 12), rng.dirichlet(np.ones(4), 12))
    V1, V2 = rng.normal(size=(2, 8, 3))
    lhs = bary_eval(emb, a * V1 + b * V2, topo)
    rhs = a * bary_eval(emb, V1, topo) + b * bary_eval(emb, V2, topo)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_surface_embedding_weights_valid(seed):
    rng = np.random.default_rng(seed)
    tet = build_lattice_tet([0, 0, 0], [1, 1, 1], (2, 1, 1))
    emb = embed_surface_in_tet(rng.uniform(-0.5, 1.5, (20, 3)), tet)
    assert emb.bary.min() >= -1e-6
    np.testing.assert_allclose(emb.bary.sum(1), 1.0, atol=1e-9)


# ---------------------------------------------------------------- file formats

def test_tetmesh_round_trip(tmp_path, beam_tet):
    path = tmp_path / "m.tetmesh"
    write_tetmesh(path, beam_tet.vertices, beam_tet.tets)
    V, T = read_tetmesh(path)
    np.testing.assert_array_equal(V, beam_tet.vertices)
    np.testing.assert_array_equal(T, beam_tet.tets)


def test_tetmesh_bad_record(tmp_path):
    path = tmp_path / "bad.tetmesh"
    path.write_text("tetmesh 4 1\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 x\nt 0 1 2 3\n")
    with pytest.raises(InputError, match=":5"):
        read_tetmesh(path)


def test_obj_round_trip_with_colors(tmp_path):
    mesh = box_surface([0, 0, 0], [1, 1, 1], (1, 1, 1))
    mesh.face_colors = np.random.default_rng(0).uniform(size=(len(mesh.faces), 3))
    write_obj(tmp_path / "m.obj", mesh.vertices, mesh.faces)
    write_face_colors(tmp_path / "c.csv", mesh.face_colors)
    back = load_surface_mesh(tmp_path / "m.obj", tmp_path / "c.csv")
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.faces, mesh.faces)
    np.testing.assert_array_equal(back.face_colors, mesh.face_colors)
