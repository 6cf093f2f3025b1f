import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from simmatch.roadnet import (LocalProjection, NetworkError, RoadNetwork, RoadState, load_network,
                              save_network)
from simmatch.synth import grid_network
from conftest import PROJ, line_network


def doc(oneway=True, lon1=0.001, extra_node=False, geometry=None):
    nodes = [{"id": 1, "lat": 0.0, "lon": 0.0}, {"id": 2, "lat": 0.0, "lon": lon1}]
    edge = {"id": 0, "from": 1, "to": 2, "oneway": oneway}
    if geometry:
        edge["geometry"] = geometry
    return {"nodes": nodes, "edges": [edge]}


# -- loading -----------------------------------------------------------------

def test_load_one_oneway_edge_at_equator():
    net = load_network(doc())
    assert list(net.edges) == [0]
    # 0.001 degree of longitude on the equator
    assert net.edges[0].length == pytest.approx(2 * math.pi * 6378137.0 / 360 * 0.001, abs=1e-6)
    assert net.edges[0].length == pytest.approx(111.32, abs=0.01)


def test_load_two_way_gives_reversed_pair():
    net = load_network(doc(oneway=False))
    assert sorted(net.edges) == [0, 1]
    np.testing.assert_array_equal(net.edges[1].coords, net.edges[0].coords[::-1])
    assert (net.edges[1].source, net.edges[1].target) == (net.edges[0].target, net.edges[0].source)


def test_missing_node_names_edge():
    d = doc()
    d["edges"][0]["to"] = 99
    with pytest.raises(NetworkError, match="edge 0"):
        load_network(d)


def test_zero_length_edge_rejected():
    with pytest.raises(NetworkError, match="edge 0"):
        load_network(doc(lon1=0.0))


def test_malformed_document():
    with pytest.raises(NetworkError):
        load_network({"nodes": [{"id": 1}], "edges": []})
    with pytest.raises(json.JSONDecodeError):
        load_network("{not json")


def test_projection_anchored_at_bbox_centre():
    net = load_network(doc())
    assert net.projection.lat0 == 0.0
    assert net.projection.lon0 == pytest.approx(0.0005)


def test_save_load_round_trip(tmp_path):
    net = grid_network(2, 3, oneway_fraction=0.5, seed=4)
    path = tmp_path / "n.json"
    save_network(net, path)
    back = load_network(path)
    assert sorted(back.edges) == sorted(net.edges)
    for eid, e in net.edges.items():
        np.testing.assert_allclose(back.edges[eid].coords, e.coords, atol=1e-6)
        assert back.edges[eid].oneway == e.oneway


def test_polyline_geometry_loaded():
    geom = [[0.0, 0.0], [0.0005, 0.0005], [0.0, 0.001]]
    net = load_network(doc(geometry=geom))
    assert len(net.edges[0].coords) == 3
    assert net.edges[0].length > 111.0


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-60, 60), st.floats(-170, 170))
def test_projection_round_trip(dlat, dlon, lat0, lon0):
    p = LocalProjection(lat0, lon0)
    lat, lon = p.to_latlon(*p.to_planar(lat0 + dlat, lon0 + dlon))
    assert lat == pytest.approx(lat0 + dlat, abs=1e-9)
    assert lon == pytest.approx(lon0 + dlon, abs=1e-9)


# -- invariants ----------------------------------------------------------------

def test_edge_invariants(grid6):
    for e in grid6.edges.values():
        assert np.hypot(*(e.coords[0] - grid6.nodes[e.source])) <= 1e-6
        assert np.hypot(*(e.coords[-1] - grid6.nodes[e.target])) <= 1e-6
        assert e.length == pytest.approx(np.hypot(*np.diff(e.coords, axis=0).T).sum(), abs=1e-6)
        assert e.id in grid6.out_edges[e.source] and e.id in grid6.in_edges[e.target]


# -- g2r -------------------------------------------------------------------------

def test_perpendicular_foot():
    net = line_network({0: [(0, 0), (10, 0)]})
    assert net.g2r_project((5, 1), 5, 8) == [(RoadState(0, 5.0), 1.0)]


def test_clamped_to_endpoint():
    net = line_network({0: [(0, 0), (10, 0)]})
    assert net.g2r_project((15, 0), 5, 8) == [(RoadState(0, 10.0), 5.0)]


def test_nothing_in_radius():
    net = line_network({0: [(0, 0), (10, 0)]})
    assert net.g2r_project((5, 30), 5, 8) == []
    assert net.g2r_nearest((5, 30), 5) is None
    with pytest.raises(ValueError):
        net.g2r_project((0, 0), 0)


def test_nearest_tie_goes_to_smaller_edge():
    # p is 2 m from both streets; street 3 (edge 6) beats street 7 (edge 14)
    net = line_network({7: [(0, 4), (10, 4)], 3: [(0, 0), (10, 0)]})
    s = net.g2r_nearest((5, 2), 10)
    assert s.edge == 6


def test_on_edge_distance_zero():
    net = line_network({0: [(0, 0), (10, 0)]})
    (s, d), = net.g2r_project((3, 0), 1)
    assert s == RoadState(0, 3.0) and d == 0.0


def test_two_directions_bit_identical(grid6):
    found = grid6.g2r_project((13.7, 41.3), 50)
    by_street = {}
    for s, d in found:
        by_street.setdefault(grid6.edges[s.edge].street, set()).add(d)
    assert all(len(v) == 1 for v in by_street.values())


def _seg_dist(p, a, b):
    d = b - a
    t = np.clip(np.dot(p - a, d) / np.dot(d, d), 0, 1)
    return float(np.hypot(*(p - (a + t * d)))), t


def brute_g2r(net, p, radius):
    """Linear scan over every segment of every edge."""
    p = np.asarray(p, dtype=float)
    out = []
    for e in net.edges.values():
        best = None
        for i in range(len(e.coords) - 1):
            d, t = _seg_dist(p, e.coords[i], e.coords[i + 1])
            if best is None or d < best[0]:
                best = (d, e.cum[i] + t * (e.cum[i + 1] - e.cum[i]))
        if best[0] <= radius:
            out.append((e.id, best[0], best[1]))
    return sorted(out, key=lambda r: (r[1], r[0]))


def random_network(rng, n_edges=50, extent=400.0):
    nodes, streets = {}, []
    for sid in range(n_edges):
        a = rng.uniform(0, extent, 2)
        pts = [a]
        for _ in range(rng.integers(1, 4)):
            pts.append(pts[-1] + rng.normal(0, 40, 2))
        u, v = 2 * sid, 2 * sid + 1
        nodes[u], nodes[v] = tuple(pts[0]), tuple(pts[-1])
        streets.append({"id": sid, "from": u, "to": v, "oneway": bool(rng.random() < 0.5),
                        "coords": np.array(pts)})
    return RoadNetwork.from_streets(nodes, streets, PROJ)


def test_g2r_matches_linear_scan():
    rng = np.random.default_rng(11)
    net = random_network(rng)
    for _ in range(100):
        p = rng.uniform(-50, 450, 2)
        got = net.g2r_project(p, 60.0)
        want = brute_g2r(net, p, 60.0)
        # The scan works on raw segment orientation, so the two directions of
        # a street may differ in the last bits; compare with a tolerance.
        ref = {e: (d, o) for e, d, o in want}
        assert {s.edge for s, _ in got} == set(ref)
        for s, d in got:
            assert d == pytest.approx(ref[s.edge][0], abs=1e-9)
            assert s.offset == pytest.approx(ref[s.edge][1], abs=1e-6)
        assert [(d, s.edge) for s, d in got] == sorted((d, s.edge) for s, d in got)
        near = net.g2r_nearest(p, 60.0)
        assert (near is None) == (not want)
        if want:
            assert ref[near.edge][0] == pytest.approx(want[0][1], abs=1e-9)


@given(st.floats(-100, 400), st.floats(-100, 400), st.floats(1, 200), st.integers(1, 10))
def test_g2r_properties(x, y, radius, k):
    net = grid_network(3, 3)
    found = net.g2r_project((x, y), radius, k)
    d = [v for _, v in found]
    assert len(found) <= k
    assert all(v <= radius for v in d)
    assert d == sorted(d)
    assert len({s.edge for s, _ in found}) == len(found)


@given(st.integers(0, 47), st.floats(0, 1))
def test_project_point_on_edge_round_trip(eid, f):
    net = grid_network(3, 3)
    e = net.edges[eid]
    p = net.point_at(RoadState(eid, f * e.length))
    s = net.g2r_nearest(p, 1.0)
    q = net.point_at(s)
    assert math.hypot(q.x - p.x, q.y - p.y) <= 1e-6


# -- geometry -------------------------------------------------------------------

def test_point_at_ends_and_polyline_midpoint():
    net = line_network({0: [(0, 0), (3, 0), (3, 4)]})
    assert net.point_at(RoadState(0, 0.0)) == (0.0, 0.0)
    assert net.point_at(RoadState(0, 7.0)) == (3.0, 4.0)
    # 3.5 m along: 3 m on the first leg, 0.5 m up the second
    assert net.point_at(RoadState(0, 3.5)) == pytest.approx((3.0, 0.5))


def test_r2g_embed_examples():
    net = line_network({0: [(0, 0), (10, 0)]})
    np.testing.assert_array_equal(net.r2g_embed(RoadState(0, 4.0), 3.0), [4, 0, 3, 0])
    np.testing.assert_array_equal(net.r2g_embed(RoadState(0, 4.0), 0.0), [4, 0, 0, 0])


def test_r2g_embed_past_corner():
    net = line_network({0: [(0, 0), (3, 0), (3, 4)]})
    v = net.r2g_embed(RoadState(0, 5.0), 2.0)
    np.testing.assert_allclose(v, [3, 2, 0, 2])
    # at the vertex itself the following segment's direction is used
    np.testing.assert_allclose(net.r2g_embed(RoadState(0, 3.0), 1.0), [3, 0, 0, 1])


@given(st.integers(0, 47), st.floats(0, 1), st.floats(0, 30))
def test_r2g_position_is_point_at(eid, f, speed):
    net = grid_network(3, 3)
    s = RoadState(eid, f * net.edges[eid].length)
    v = net.r2g_embed(s, speed)
    assert (v[0], v[1]) == tuple(net.point_at(s))


# -- routing ------------------------------------------------------------------------

def test_route_same_edge():
    net = line_network({0: [(0, 0), (10, 0)]})
    assert net.route_distance(RoadState(0, 2.0), RoadState(0, 7.0)) == 5.0
    assert net.route_distance(RoadState(0, 7.0), RoadState(0, 2.0)) == math.inf


def test_route_across_shared_node():
    net = line_network({0: [(0, 0), (10, 0)], 1: [(10, 0), (10, 10)]})
    assert net.route_distance(RoadState(0, 8.0), RoadState(2, 3.0)) == pytest.approx(5.0)


def test_route_cutoff():
    net = line_network({0: [(0, 0), (10, 0)], 1: [(10, 0), (10, 10)]})
    assert net.route_distance(RoadState(0, 8.0), RoadState(2, 3.0), cutoff=4.9) == math.inf
    with pytest.raises(ValueError):
        net.route_distance(RoadState(0, 0.0), RoadState(0, 1.0), cutoff=0)


def floyd_warshall(net):
    ids = sorted(net.nodes)
    ix = {n: i for i, n in enumerate(ids)}
    D = np.full((len(ids), len(ids)), math.inf)
    np.fill_diagonal(D, 0.0)
    for e in net.edges.values():
        D[ix[e.source], ix[e.target]] = min(D[ix[e.source], ix[e.target]], e.length)
    for k in range(len(ids)):
        D = np.minimum(D, D[:, k:k + 1] + D[k:k + 1, :])
    return D, ix


def oracle_route(net, D, ix, a, b):
    ea, eb = net.edges[a.edge], net.edges[b.edge]
    if a.edge == b.edge and b.offset >= a.offset:
        return b.offset - a.offset
    return (ea.length - a.offset) + D[ix[ea.target], ix[eb.source]] + b.offset


def random_graph(rng, n=30):
    pos = rng.uniform(0, 1000, (n, 2))
    nodes = {i: tuple(p) for i, p in enumerate(pos)}
    streets, sid = [], 0
    for i in range(n):
        for j in rng.choice(n, 3, replace=False):
            if i != j:
                streets.append({"id": sid, "from": i, "to": int(j), "oneway": bool(rng.random() < 0.5)})
                sid += 1
    return RoadNetwork.from_streets(nodes, streets, PROJ)


def test_route_distance_vs_floyd_warshall():
    rng = np.random.default_rng(5)
    for _ in range(5):
        net = random_graph(rng)
        D, ix = floyd_warshall(net)
        eids = sorted(net.edges)
        states = [RoadState(e, float(rng.uniform(0, net.edges[e].length)))
                  for e in rng.choice(eids, 25)]
        M = net.route_matrix(states, states, math.inf)
        for i, a in enumerate(states):
            for j, b in enumerate(states):
                want = oracle_route(net, D, ix, a, b)
                assert M[i, j] == pytest.approx(want, abs=1e-6) or (M[i, j] == want == math.inf)
                assert net.route_distance(a, b) == M[i, j]


def test_route_identity_and_triangle(grid3):
    rng = np.random.default_rng(2)
    eids = sorted(grid3.edges)
    for _ in range(30):
        a = RoadState(int(rng.choice(eids)), 10.0)
        c = RoadState(int(rng.choice(eids)), 60.0)
        assert grid3.route_distance(a, a) == 0.0
        path = grid3.shortest_path(a, c)
        if path is None or len(path) < 3:
            continue
        b = RoadState(path[1], 0.0)  # start of an edge on the chosen path
        assert grid3.route_distance(a, c) <= grid3.route_distance(a, b) + grid3.route_distance(b, c) + 1e-9


def test_path_coords_follow_road(grid3):
    a, b = RoadState(0, 50.0), RoadState(2, 50.0)
    pts = grid3.path_coords(a, b)
    length = sum(math.dist(p, q) for p, q in zip(pts, pts[1:]))
    assert length == pytest.approx(grid3.route_distance(a, b))
