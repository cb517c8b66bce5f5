"""Turn episode supply-demand imbalances into an integral relocation plan.

The pipeline is: imbalance matrix (supply minus outgoing demand, masked by a
threshold) -> bipartite graph from excess cells to deficit cells reachable in
time -> integral flow maximizing total edge utility -> per-cell stay/move
probability rows.  The flow problem is solved exactly with successive
shortest augmenting paths on a residual network, one weakly-connected
component at a time, so every coordinated recommendation traces back to an
edge and its utility decomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

MAX_UTILITY = "max_utility"  # maximize sum of flow * edge utility
MAX_VOLUME = "max_volume"    # treat every edge utility as 1 (max flow)


@dataclass
class ImbalanceMatrix:
    """Masked supply-demand imbalance per (timestep, zone)."""

    delta: np.ndarray  # (T, m); entries with |raw delta| < threshold are zeroed
    threshold: float


def compute_imbalance(trace, demand: np.ndarray, threshold: float) -> ImbalanceMatrix:
    """Imbalance = idle supply minus outgoing demand, masked below threshold."""
    supply = np.asarray(trace.supply, dtype=np.float64)
    outgoing = np.asarray(demand).sum(axis=2)
    if supply.shape != outgoing.shape:
        raise ContractViolation(
            f"trace supply {supply.shape} does not match demand {outgoing.shape}"
        )
    delta = supply - outgoing
    delta[np.abs(delta) < threshold] = 0.0
    return ImbalanceMatrix(delta=delta, threshold=threshold)


@dataclass(frozen=True)
class GraphNode:
    """An imbalanced (timestep, zone) cell; magnitude is |delta| there."""

    t: int
    zone: int
    magnitude: float


@dataclass(frozen=True)
class GraphEdge:
    excess: int   # index into graph.excess
    deficit: int  # index into graph.deficit
    utility: float


@dataclass
class RebalancingGraph:
    """Bipartite excess -> deficit graph of time-feasible relocations."""

    excess: list[GraphNode]
    deficit: list[GraphNode]
    edges: list[GraphEdge]


def build_graph(
    imbalance: ImbalanceMatrix,
    matrices,
    q_independent: np.ndarray,
) -> RebalancingGraph:
    """Nodes for every masked-nonzero imbalance cell, edges where a relocating
    driver can depart at the excess time and arrive by the deficit time.

    Edge utility is the wait-action value at the destination cell, minus the
    relocation cost, minus the wait-action value left behind at the origin.
    A zone may feed its own later deficit; that flow lands on the stay entry
    of the rebalance rows and anchors crowds that are needed where they are.
    """
    delta = imbalance.delta
    travel = matrices.travel_time
    cost = matrices.relocation_cost
    ts, zs = np.nonzero(delta)
    excess, deficit = [], []
    for t, h in zip(ts.tolist(), zs.tolist()):  # nonzero scans row-major: (t, h) ascending
        value = delta[t, h]
        node = GraphNode(t=t, zone=h, magnitude=abs(value))
        (excess if value > 0 else deficit).append(node)
    if not excess or not deficit:
        return RebalancingGraph(excess=excess, deficit=deficit, edges=[])

    src_t = np.array([n.t for n in excess])[:, None]
    src_h = np.array([n.zone for n in excess])[:, None]
    dst_t = np.array([n.t for n in deficit])[None, :]
    dst_h = np.array([n.zone for n in deficit])[None, :]
    feasible = src_t + travel[src_t, src_h, dst_h] <= dst_t
    wait_value = q_independent[:, np.arange(matrices.m), np.arange(matrices.m)]
    utility = (
        wait_value[dst_t, dst_h]
        - cost[src_t, src_h, dst_h]
        - wait_value[src_t, src_h]
    )
    edges = [
        GraphEdge(excess=int(i), deficit=int(j), utility=float(utility[i, j]))
        for i, j in zip(*np.nonzero(feasible))  # row-major keeps insertion order
    ]
    return RebalancingGraph(excess=excess, deficit=deficit, edges=edges)


@dataclass
class FlowSolution:
    """Integral per-edge flows and the achieved objective value."""

    flows: np.ndarray  # (len(edges),) int64
    objective: float


_COST_EPS = 1e-12  # ignore float-dust "profitable" paths


def _solve_component(graph, edge_ids, capacities_src, capacities_dst, costs):
    """Successive shortest augmenting paths on one component.

    Residual network over [source] + excess + deficit + [sink]; augment along
    the most negative-cost path until none exists.  Costs are negated edge
    utilities, so stopping at nonnegative path cost ships exactly the
    profitable flow; with uniform costs it degenerates to plain max flow.
    Shortest paths come from a numpy-vectorized Bellman-Ford; ties pick the
    lowest arc index, which follows edge insertion order.
    """
    ex_ids = sorted({graph.edges[i].excess for i in edge_ids})
    df_ids = sorted({graph.edges[i].deficit for i in edge_ids})
    ex_pos = {e: k for k, e in enumerate(ex_ids)}
    df_pos = {d: k for k, d in enumerate(df_ids)}
    n_nodes = 2 + len(ex_ids) + len(df_ids)
    source, sink = 0, n_nodes - 1

    # Forward and reverse residual arcs in one flat table.
    src_l, dst_l, cap_l, cost_l = [], [], [], []

    def add_arc(u, v, cap, cost):
        src_l.extend((u, v))
        dst_l.extend((v, u))
        cap_l.extend((cap, 0))
        cost_l.extend((cost, -cost))

    for e in ex_ids:
        add_arc(source, 1 + ex_pos[e], capacities_src[e], 0.0)
    edge_arc = {}
    for i in edge_ids:
        e = graph.edges[i]
        u = 1 + ex_pos[e.excess]
        v = 1 + len(ex_ids) + df_pos[e.deficit]
        edge_arc[i] = len(src_l)
        add_arc(u, v, min(capacities_src[e.excess], capacities_dst[e.deficit]), costs[i])
    for d in df_ids:
        add_arc(1 + len(ex_ids) + df_pos[d], sink, capacities_dst[d], 0.0)

    arc_src = np.array(src_l, dtype=np.int64)
    arc_dst = np.array(dst_l, dtype=np.int64)
    arc_cap = np.array(cap_l, dtype=np.int64)
    arc_cost = np.array(cost_l, dtype=np.float64)
    n_arcs = len(arc_src)
    rev = np.arange(n_arcs) ^ 1  # arcs were added in forward/reverse pairs

    flows = {i: 0 for i in edge_ids}
    initial_cap = {i: arc_cap[a] for i, a in edge_arc.items()}
    while True:
        dist = np.full(n_nodes, np.inf)
        pred = np.full(n_nodes, -1, dtype=np.int64)
        dist[source] = 0.0
        for _ in range(n_nodes - 1):
            live = arc_cap > 0
            cand = dist[arc_src] + arc_cost
            cand[~live] = np.inf
            best = np.full(n_nodes, np.inf)
            np.minimum.at(best, arc_dst, cand)
            improved_nodes = best < dist
            if not improved_nodes.any():
                break
            # lowest arc index wins a tie: assign winners in descending order
            winners = improved_nodes[arc_dst] & (cand == best[arc_dst])
            idx = np.flatnonzero(winners)[::-1]
            pred[arc_dst[idx]] = idx
            dist = np.where(improved_nodes, best, dist)
        if not np.isfinite(dist[sink]) or dist[sink] >= -_COST_EPS:
            break
        # Bottleneck along the path, then push (guard against float-dust cycles).
        path = []
        v, steps = sink, 0
        while v != source and steps <= n_nodes:
            a = int(pred[v])
            path.append(a)
            v = int(arc_src[a])
            steps += 1
        if v != source:
            break
        bottleneck = int(arc_cap[path].min())
        if bottleneck <= 0:
            break
        arc_cap[path] -= bottleneck
        arc_cap[rev[path]] += bottleneck

    for i, a in edge_arc.items():
        flows[i] = int(initial_cap[i] - arc_cap[a])
    return flows


def solve_rebalance(graph: RebalancingGraph, objective: str = MAX_UTILITY) -> FlowSolution:
    """Optimal integral flow under node-capacity constraints.

    MAX_UTILITY drops edges with utility <= 0 first (an optimal plan never
    ships along them) and maximizes total utility; MAX_VOLUME values every
    feasible relocation at 1 and maximizes count.
    """
    if objective not in (MAX_UTILITY, MAX_VOLUME):
        raise ContractViolation(f"unknown rebalance objective {objective!r}")
    n_edges = len(graph.edges)
    flows = np.zeros(n_edges, dtype=np.int64)
    if n_edges == 0:
        return FlowSolution(flows=flows, objective=0.0)

    cap_src = [int(math.floor(node.magnitude)) for node in graph.excess]
    cap_dst = [int(math.floor(node.magnitude)) for node in graph.deficit]
    if objective == MAX_UTILITY:
        usable = [i for i, e in enumerate(graph.edges) if e.utility > 0]
        costs = {i: -graph.edges[i].utility for i in usable}
    else:
        usable = list(range(n_edges))
        costs = {i: -1.0 for i in usable}
    for component in _components_of(graph, usable):
        solved = _solve_component(graph, component, cap_src, cap_dst, costs)
        for i, f in solved.items():
            flows[i] = f

    if objective == MAX_UTILITY:
        value = float(sum(f * graph.edges[i].utility for i, f in enumerate(flows)))
    else:
        value = float(flows.sum())
    return FlowSolution(flows=flows, objective=value)


def _components_of(graph: RebalancingGraph, edge_ids: list[int]) -> list[list[int]]:
    """Weakly-connected components restricted to the given edges."""
    parent = list(range(len(graph.excess) + len(graph.deficit)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    offset = len(graph.excess)
    for i in edge_ids:
        e = graph.edges[i]
        a, b = find(e.excess), find(offset + e.deficit)
        if a != b:
            parent[b] = a
    groups: dict[int, list[int]] = {}
    for i in edge_ids:
        groups.setdefault(find(graph.edges[i].excess), []).append(i)
    return list(groups.values())


def flow_to_rebalance_matrix(
    solution: FlowSolution,
    graph: RebalancingGraph,
    imbalance: ImbalanceMatrix,
    m: int,
) -> np.ndarray:
    """Per-excess-cell probability rows over stay and feasible moves.

    Row (t, h) of the result sums to 1 exactly when (t, h) is an excess node:
    the diagonal holds the stay share, each flowed edge its move share.
    """
    T = imbalance.delta.shape[0]
    zeta = np.zeros((T, m, m), dtype=np.float64)
    # Integer flow totals first, one division per cell at the end, so every
    # entry is an exact quotient <= 1 (no accumulation dust above 1.0).
    # Flow into the node's own zone (a later local deficit) counts as stay.
    outflow = np.zeros(len(graph.excess), dtype=np.int64)
    moved_away = np.zeros(len(graph.excess), dtype=np.int64)
    by_dest_zone: dict[tuple[int, int], int] = {}
    for i, e in enumerate(graph.edges):
        flow = int(solution.flows[i])
        if flow == 0:
            continue
        outflow[e.excess] += flow
        dest_zone = graph.deficit[e.deficit].zone
        if dest_zone != graph.excess[e.excess].zone:
            moved_away[e.excess] += flow
            key = (e.excess, dest_zone)
            by_dest_zone[key] = by_dest_zone.get(key, 0) + flow
    for k, node in enumerate(graph.excess):
        delta = imbalance.delta[node.t, node.zone]
        if outflow[k] > delta:
            raise ContractViolation(
                f"flow {outflow[k]} exceeds excess {delta} at (t={node.t}, h={node.zone})"
            )
        zeta[node.t, node.zone, node.zone] = (delta - moved_away[k]) / delta
    for (k, dest_zone), flow in by_dest_zone.items():
        node = graph.excess[k]
        delta = imbalance.delta[node.t, node.zone]
        zeta[node.t, node.zone, dest_zone] = flow / delta
    return zeta


def rebalance_report(graph: RebalancingGraph, solution: FlowSolution) -> dict:
    """JSON-friendly audit trail: every recommendation with its utility parts."""
    return {
        "format_version": 1,
        "excess": [
            {"t": n.t, "zone": n.zone, "magnitude": n.magnitude} for n in graph.excess
        ],
        "deficit": [
            {"t": n.t, "zone": n.zone, "magnitude": n.magnitude} for n in graph.deficit
        ],
        "edges": [
            {
                "from": {"t": graph.excess[e.excess].t, "zone": graph.excess[e.excess].zone},
                "to": {"t": graph.deficit[e.deficit].t, "zone": graph.deficit[e.deficit].zone},
                "utility": e.utility,
                "flow": int(solution.flows[i]),
            }
            for i, e in enumerate(graph.edges)
        ],
        "objective": solution.objective,
    }
