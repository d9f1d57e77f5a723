import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hrfem.mesh import (
    Mesh,
    MeshError,
    classify_entities,
    generate_structured,
    load_mesh,
    mesh_from_spec,
    refine_uniform,
    save_mesh,
    signed_areas,
)

from conftest import jiggle


# -- generators: hand-counted entity tables [DERIVED] ---------------------------

def test_crisscross_1_counts(cc1):
    assert (cc1.nv, cc1.nt, cc1.ne) == (5, 4, 8)
    assert len(cc1.interior_vertices) == 1
    assert len(cc1.interior_edges) == 4


def test_crisscross_2_counts_and_euler(cc2):
    assert (cc2.nv, cc2.nt, cc2.ne) == (13, 16, 28)
    assert cc2.nv - cc2.ne + cc2.nt == 1


def test_single_square_alternating_is_rejected():
    # two triangles, no interior vertex
    with pytest.raises(MeshError):
        generate_structured(1, "alternating")


def test_odd_alternating_is_rejected():
    with pytest.raises(MeshError):
        generate_structured(3, "alternating")


def test_even_alternating_is_accepted():
    m = generate_structured(4, "alternating")
    assert m.nt == 32 and m.nv == 25


def test_unknown_pattern():
    with pytest.raises(MeshError):
        generate_structured(2, "zigzag")


def test_classify_crisscross_1(cc1):
    t = classify_entities(cc1)
    assert [len(t.interior_vertices), len(t.boundary_vertices),
            len(t.interior_edges), len(t.boundary_edges)] == [1, 4, 4, 4]


def test_classify_crisscross_2(cc2):
    t = classify_entities(cc2)
    assert len(t.interior_vertices) == 5
    assert len(t.interior_edges) == 20
    assert len(t.interior_edges) + len(t.boundary_edges) == cc2.ne


def test_positive_orientation_everywhere():
    for spec in ("crisscross:3", "alternating:4"):
        m = mesh_from_spec(spec)
        assert np.all(signed_areas(m.vertices, m.triangles) > 0)


def test_local_edge_is_opposite_local_vertex(cc2):
    for t in range(cc2.nt):
        for k in range(3):
            e = cc2.edges[cc2.edge_of_triangle[t, k]]
            assert cc2.triangles[t, k] not in e


# -- refinement --------------------------------------------------------------------

def test_refine_counts(cc1):
    r = refine_uniform(cc1)
    assert r.nt == 16
    assert r.nv - r.ne + r.nt == 1


def test_refine_halves_diameters(cc2):
    r = refine_uniform(cc2)
    parent = np.repeat(cc2.diameters, 4)
    assert np.allclose(r.diameters, parent / 2, rtol=0, atol=1e-15)


def test_entity_ratios_approach_limits():
    # nt/nv -> 2 and interior edges / nv -> 3 under refinement
    m = mesh_from_spec("crisscross:2")
    prev = None
    for _ in range(4):
        m = refine_uniform(m)
        ratios = (m.nt / m.nv, len(m.interior_edges) / m.nv)
        if prev is not None:
            assert abs(ratios[0] - 2) < abs(prev[0] - 2)
            assert abs(ratios[1] - 3) < abs(prev[1] - 3)
        prev = ratios
    assert abs(prev[0] - 2) < 0.07 and abs(prev[1] - 3) < 0.15


# -- file format ----------------------------------------------------------------------

def test_round_trip_is_bit_exact(tmp_path, cc1):
    path = tmp_path / "m.txt"
    save_mesh(cc1, path)
    back = load_mesh(path)
    assert np.array_equal(back.vertices, cc1.vertices)
    assert np.array_equal(back.triangles, cc1.triangles)


def test_round_trip_irrational_coordinates(tmp_path, cc2):
    m = jiggle(cc2, 0.1, 3)
    save_mesh(m, tmp_path / "m.txt")
    assert np.array_equal(load_mesh(tmp_path / "m.txt").vertices, m.vertices)


def _write(tmp_path, text):
    p = tmp_path / "bad.txt"
    p.write_text(text)
    return p


CC1_VERTS = "0 0\n1 0\n1 1\n0 1\n0.5 0.5\n"


def test_index_out_of_range_reports_line(tmp_path):
    p = _write(tmp_path, "5 4\n" + CC1_VERTS + "0 1 4\n1 2 4\n2 3 5\n3 0 4\n")
    with pytest.raises(MeshError, match=r"line 9: index out of range"):
        load_mesh(p)


def test_malformed_header(tmp_path):
    with pytest.raises(MeshError, match="line 1"):
        load_mesh(_write(tmp_path, "five four\n"))


def test_zero_area_reports_line(tmp_path):
    p = _write(tmp_path, "5 4\n" + CC1_VERTS + "0 1 4\n1 2 4\n0 4 2\n3 0 4\n")
    with pytest.raises(MeshError, match=r"line 9: nonpositive"):
        load_mesh(p)


def test_bad_vertex_line(tmp_path):
    p = _write(tmp_path, "5 4\n0 0\n1 zero\n1 1\n0 1\n0.5 0.5\n0 1 4\n1 2 4\n2 3 4\n3 0 4\n")
    with pytest.raises(MeshError, match="line 3"):
        load_mesh(p)


def test_truncated_file(tmp_path):
    with pytest.raises(MeshError, match="unexpected end"):
        load_mesh(_write(tmp_path, "5 4\n" + CC1_VERTS + "0 1 4\n"))


def test_clockwise_triangle_is_reordered(tmp_path):
    p = _write(tmp_path, "5 4\n" + CC1_VERTS + "0 4 1\n1 2 4\n2 3 4\n3 0 4\n")
    m = load_mesh(p)
    assert np.all(signed_areas(m.vertices, m.triangles) > 0)
    assert set(m.triangles[0]) == {0, 1, 4}


def test_mesh_spec_parsing(tmp_path, cc1):
    save_mesh(cc1, tmp_path / "a.txt")
    assert mesh_from_spec(f"file:{tmp_path / 'a.txt'}").nt == 4
    for bad in ("crisscross", "crisscross:x", "hexagon:2"):
        with pytest.raises(MeshError):
            mesh_from_spec(bad)


def test_locate(cc1):
    cells = cc1.locate(np.array([[0.5, 0.1], [0.9, 0.5], [0.5, 0.9], [0.1, 0.5], [2.0, 2.0]]))
    assert list(cells[:4]) == [0, 1, 2, 3]
    assert cells[4] == -1


def test_arrays_are_read_only(cc1):
    with pytest.raises(ValueError):
        cc1.vertices[0, 0] = 3.0


# -- properties -------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 5), levels=st.integers(0, 2))
def test_crisscross_topology_invariants(n, levels):
    m = generate_structured(n, "crisscross")
    for _ in range(levels):
        m = refine_uniform(m)
    assert m.nv - m.ne + m.nt == 1
    assert 3 * m.nt == 2 * len(m.interior_edges) + len(m.boundary_edges)
    assert np.isclose(m.areas.sum(), 1.0)
    assert len(m.boundary_vertices) == len(m.boundary_edges)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), amount=st.floats(0.0, 0.25))
def test_round_trip_property(tmp_path_factory, seed, amount):
    m = jiggle(generate_structured(2, "crisscross"), amount, seed)
    path = tmp_path_factory.mktemp("rt") / "m.txt"
    save_mesh(m, path)
    back = load_mesh(path)
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.triangles, m.triangles)
    assert np.array_equal(back.edges, m.edges)
