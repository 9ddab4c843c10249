"""Synthetic node map and the N-M aggregator assignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .errors import InvalidAggregatorCount

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankTopology:
    """World of N ranks partitioned into contiguous synthetic nodes."""

    nodes: tuple[tuple[int, ...], ...]  # nodes[node_id] = ranks on that node

    @classmethod
    def uniform(cls, n_nodes: int, ranks_per_node: int) -> "RankTopology":
        nodes = tuple(
            tuple(range(n * ranks_per_node, (n + 1) * ranks_per_node))
            for n in range(n_nodes)
        )
        return cls(nodes)

    @property
    def world_size(self) -> int:
        return sum(len(r) for r in self.nodes)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def node_of(self, rank: int) -> int:
        for node_id, ranks in enumerate(self.nodes):
            if rank in ranks:
                return node_id
        raise ValueError(f"rank {rank} not in topology")

    def all_ranks(self) -> list[int]:
        return [r for ranks in self.nodes for r in ranks]


@dataclass(frozen=True)
class AggregatorAssignment:
    """rank -> (aggregator rank, chain position); aggregators sit at position 0."""

    aggregator_of: dict[int, int]
    position_of: dict[int, int]
    groups: dict[int, tuple[int, ...]]  # aggregator rank -> group members, ascending
    star: bool = False  # True: members send straight to the aggregator (funnel)

    @property
    def aggregators(self) -> list[int]:
        return sorted(self.groups)

    @property
    def n_aggregators(self) -> int:
        return len(self.groups)

    def subfile_id(self, aggregator_rank: int) -> int:
        return self.aggregators.index(aggregator_rank)

    def downstream_of(self, rank: int) -> int:
        """Next hop toward the aggregator (the chain neighbor one position down)."""
        agg = self.aggregator_of[rank]
        if self.star:
            return agg
        group = self.groups[agg]
        pos = self.position_of[rank]
        return group[pos - 1]


def assign_aggregators(topology: RankTopology, aggregators_per_node: int) -> AggregatorAssignment:
    """Split each node's ranks into contiguous groups led by their lowest rank."""
    if aggregators_per_node < 1:
        raise InvalidAggregatorCount(f"aggregators_per_node={aggregators_per_node}")
    aggregator_of: dict[int, int] = {}
    position_of: dict[int, int] = {}
    groups: dict[int, tuple[int, ...]] = {}
    for node_ranks in topology.nodes:
        k = aggregators_per_node
        if k > len(node_ranks):
            log.warning(
                "clamping %d aggregators to %d ranks on node", k, len(node_ranks)
            )
            k = len(node_ranks)
        base, extra = divmod(len(node_ranks), k)
        cursor = 0
        for g in range(k):
            size = base + (1 if g < extra else 0)
            members = tuple(node_ranks[cursor:cursor + size])
            cursor += size
            agg = members[0]
            groups[agg] = members
            for pos, rank in enumerate(members):
                aggregator_of[rank] = agg
                position_of[rank] = pos
    return AggregatorAssignment(aggregator_of, position_of, groups)


def funnel_assignment(topology: RankTopology) -> AggregatorAssignment:
    """Everything routed straight to rank 0 (serial root-writer baseline)."""
    ranks = tuple(sorted(topology.all_ranks()))
    root = ranks[0]
    return AggregatorAssignment(
        aggregator_of={r: root for r in ranks},
        position_of={r: i for i, r in enumerate(ranks)},
        groups={root: ranks},
        star=True,
    )


def fpp_assignment(topology: RankTopology) -> AggregatorAssignment:
    """Every rank its own aggregator (file-per-process, M = N)."""
    ranks = topology.all_ranks()
    return AggregatorAssignment(
        aggregator_of={r: r for r in ranks},
        position_of={r: 0 for r in ranks},
        groups={r: (r,) for r in ranks},
    )
