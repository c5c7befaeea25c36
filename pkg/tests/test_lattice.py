# tests/test_lattice.py
import numpy as np
import pytest

from occupation_lab.errors import LatticeError
from occupation_lab.lattice import (
    Box, BoxArray, SiteIndex, as_sites, check_dimension, continuum_distance, discrete_blowup,
    enumerate_box, external_boundary, internal_boundary, neighbourhood, parse_site_set,
    sites_to_strings, unit_vectors,
)


def test_dimension_below_three_is_rejected():
    with pytest.raises(LatticeError):
        check_dimension(2)
    assert check_dimension(4) == 4


def test_unit_vectors_order():
    e = unit_vectors(3)
    assert e.shape == (6, 3)
    assert tuple(e[0]) == (1, 0, 0)
    assert tuple(e[1]) == (-1, 0, 0)
    assert tuple(e[4]) == (0, 0, 1)


def test_as_sites_sorts_and_deduplicates():
    sites = as_sites([(1, 0, 0), (0, 0, 0), (1, 0, 0)])
    assert sites.tolist() == [[0, 0, 0], [1, 0, 0]]


def test_box_counts_and_membership():
    b = Box.centered(2)
    assert b.size == 125
    assert len(enumerate_box(b)) == 125
    assert b.contains([[2, -2, 0], [3, 0, 0]]).tolist() == [True, False]


def test_box_radius_must_be_nonnegative_integer():
    with pytest.raises(LatticeError):
        Box((0, 0, 0), -1)
    with pytest.raises(LatticeError):
        Box((0, 0, 0), 1.5)


def test_site_index_lookup():
    index = SiteIndex(Box((1, 1, 1), 1).sites())
    assert len(index) == 27
    pos = index.lookup([[0, 0, 0], [5, 5, 5]])
    assert pos[0] >= 0 and pos[1] == -1
    assert index.sites[pos[0]].tolist() == [0, 0, 0]


def test_boundaries_of_a_single_point():
    inner = internal_boundary([(0, 0, 0)])
    outer = external_boundary([(0, 0, 0)])
    assert inner.tolist() == [[0, 0, 0]]
    assert len(outer) == 6
    assert np.abs(outer).sum(axis=1).tolist() == [1] * 6


def test_internal_boundary_of_a_box_is_its_shell():
    shell = internal_boundary(Box.centered(2).sites())
    assert len(shell) == 5 ** 3 - 3 ** 3


def test_neighbourhood_grows_a_box():
    grown = neighbourhood(Box.centered(1).sites(), 2)
    assert len(grown) == 7 ** 3


def test_discrete_blowup_of_box_and_ball():
    box = discrete_blowup("box", 1.0, 3)
    assert len(box) == 7 ** 3
    ball = discrete_blowup("ball", 1.0, 1)
    assert len(ball) == 7
    with pytest.raises(LatticeError):
        discrete_blowup("torus", 1.0, 3)
    with pytest.raises(LatticeError):
        discrete_blowup("box", 1.0, 0)


def test_continuum_distance_is_zero_inside():
    pts = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    assert continuum_distance("ball", 1.0, pts).tolist() == [0.0, 1.0]
    assert continuum_distance("box", 1.0, pts).tolist() == [0.0, 1.0]


def test_box_array_energy_of_a_point_mass():
    h = BoxArray.from_sites([(0, 0, 0)], [1.0], box=Box.centered(1))
    # six edges of unit jump, each weighted 1/(2d)
    assert h.dirichlet_energy() == pytest.approx(1.0)
    assert h.at([[0, 0, 0], [9, 9, 9]]).tolist() == [1.0, 0.0]
    assert h.gauss_green_defect() == pytest.approx(0.0, abs=1e-12)


def test_laplacian_of_a_point_mass():
    h = BoxArray.from_sites([(0, 0, 0)], [1.0], box=Box.centered(1))
    lap = h.laplacian()
    assert lap.at([[0, 0, 0]])[0] == pytest.approx(-1.0)
    assert lap.at([[1, 0, 0]])[0] == pytest.approx(1 / 6)


@pytest.mark.parametrize("text,size", [
    ("B(0,4)", 9 ** 3),
    ("B((1,0,0),2)", 5 ** 3),
    ("{0}", 1),
    ("{0,e1}", 2),
    ("{(0,0,0),(1,0,0)}", 2),
])
def test_parse_site_set_forms(text, size):
    assert len(parse_site_set(text)) == size


def test_parse_site_set_rejects_garbage():
    with pytest.raises(LatticeError):
        parse_site_set("ball of radius 3")
    with pytest.raises(LatticeError):
        parse_site_set("{e7}")


def test_sites_to_strings():
    assert sites_to_strings([(0, 1, -2)]) == ["(0,1,-2)"]
