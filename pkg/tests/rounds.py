"""Chained protocol rounds over a lossy network, with agreement bookkeeping."""
import random

import numpy as np

from cexplore.dispatch import DispatchNode, Kind, NetworkModel, encode_sequences, round_budget, run_round
from cexplore.tasks import TaskUnit


def unit(uid):
    return TaskUnit(uid, np.array([float(uid), 0.0, 1.5]), 10, grid=uid)


class Trial:
    """One network, ``n`` nodes, rounds hosted by node 0 back to back."""

    def __init__(self, seed, n=4, drop=0.3, dup=0.1, reorder=True):
        self.rng = random.Random(seed)
        self.net = NetworkModel(drop=drop, delay=(1, 4), dup=dup, reorder=reorder, seed=seed)
        self.nodes = [DispatchNode(i, self.net) for i in range(n)]
        self.tick = 0
        self.next_uid = 1
        self.violations = []

    def random_sequences(self):
        ids = list(range(self.next_uid, self.next_uid + self.rng.randint(0, 6)))
        self.next_uid += len(ids)
        seqs = {n.id: [] for n in self.nodes}
        for u in ids:
            seqs[self.rng.randrange(len(self.nodes))].append(u)
        return seqs, [unit(u) for u in ids]

    def round(self, force_reject=None):
        host, *parts = self.nodes
        seqs, units = self.random_sequences()
        before = {n.id: n.state.active for n in self.nodes}
        if force_reject is not None:
            self.nodes[force_reject].state.terminal_units.update(u.id for u in units)
            seqs[force_reject].append(units[0].id) if units else None
        outcome, decided = run_round(host, parts, self.net, seqs, tick=self.tick, units=units)
        v = host.round.version
        self.tick = decided + 2 * round_budget()
        self.check(v, before)
        return outcome, v

    def check(self, v, before):
        host = self.nodes[0]
        verdicts = {n.id: n.state.decided.get(v) for n in self.nodes}
        if {k for k in verdicts.values() if k is not None} == {Kind.FINALIZE, Kind.CANCEL}:
            self.violations.append(("agreement", v, verdicts))
        for n in self.nodes:
            s = n.state
            if s.active < before[n.id]:
                self.violations.append(("monotone", v, n.id))
            if host.decisions[v] == Kind.CANCEL and v in s.seen and n.settled():
                if s.assignment_bytes() != encode_sequences(s.seen[v][0]):
                    self.violations.append(("rollback", v, n.id))
            if host.decisions.get(s.finalized_view()[0]) == Kind.CANCEL:
                self.violations.append(("acts-on-cancelled", v, n.id))
