"""
Edge-server actors for the distributed solver.

The coordinator (server 1) drives the protocol; every other server is an
``EdgeServer`` that only ever reacts to a batch of records. Two transports
carry the batches: an in-process one that still round-trips every batch
through the byte codec, and a pipe-per-process one. Both hand back the
records the edges produced, in server order.
"""
import itertools
import multiprocessing as mp
from collections import defaultdict

import numpy as np
from loguru import logger

from app.core.wire import decode_batch, encode_batch
from app.schemas.admm import (
    CONTINUE,
    SHUTDOWN,
    STOP_INNER,
    AdmmIterate,
    AdmmOptions,
    CoordinatorState,
    EdgeState,
    MecAssignment,
    Message,
    MessageType,
)
from app.schemas.scenario import BeamformingSolution, NetworkScenario


def _records(outer: int, inner: int, kind: MessageType, server: int, values) -> list[Message]:
    return [
        Message(outer_iter=outer, inner_iter=inner, type=kind, user=i, server=server, payload=tuple(map(float, v)))
        for i, v in enumerate(values)
    ]


class EdgeServer:
    """Server d >= 2: holds its own beamformers, (q^, y^), rho and penalty."""

    def __init__(self, scenario: NetworkScenario, bs_set: list[int], options: AdmmOptions, state: EdgeState):
        self.scenario = scenario
        self.bs_set = bs_set
        self.options = options
        self.state = state
        self.running = True
        self.last_ok = True
        # Global updates received over the whole run; drives the penalty freeze.
        self.inner_total = 0

    def _partials(self, outer: int, inner: int) -> list[Message]:
        from app.services.admm_service import edge_partial

        partial = edge_partial(self.state)
        m = self.state.penalty
        d = self.state.server
        return _records(outer, inner, MessageType.GLOBAL_PARTIAL_Q, d, [(p, m) for p in partial[:, 0]]) + _records(
            outer, inner, MessageType.GLOBAL_PARTIAL_Y, d, [(p, m) for p in partial[:, 1]]
        )

    def _local_step(self, outer: int, inner: int) -> list[Message]:
        from app.services.admm_service import admm_service

        self.last_ok = admm_service.serverd_update(self.state, self.scenario, self.bs_set)
        return self._partials(outer, inner)

    def handle(self, batch: list[Message]) -> list[Message]:
        """React to one batch from the coordinator and return the reply batch."""
        from app.services.admm_service import (
            adaptive_penalty,
            admm_service,
            multiplier_update,
            residuals,
        )

        if not batch:
            return []
        by_type: dict[MessageType, list[Message]] = defaultdict(list)
        for m in batch:
            by_type[m.type].append(m)
        outer, inner = batch[0].outer_iter, batch[0].inner_iter
        N = self.scenario.num_users
        d = self.state.server
        replies: list[Message] = []

        if MessageType.INTERFERENCE_U in by_type:
            u = np.empty(N)
            for m in by_type[MessageType.INTERFERENCE_U]:
                u[m.user] = m.payload[0]
            self.state.u = u
            self.state.g, sum_a = admm_service.local_linearization(
                self.scenario, self.state.beamformers, u, self.bs_set
            )
            replies += _records(outer, 0, MessageType.SUM_A, d, [(a,) for a in sum_a])
            replies += self._local_step(outer, 1)

        if MessageType.GLOBAL_Q in by_type:
            phi = np.empty((N, 2))
            for m in by_type[MessageType.GLOBAL_Q]:
                phi[m.user, 0] = m.payload[0]
            for m in by_type[MessageType.GLOBAL_Y]:
                phi[m.user, 1] = m.payload[0]
            state = self.state
            state.phi_prev, state.phi = state.phi, phi
            self.inner_total += 1
            state.rho = multiplier_update(state.rho, state.penalty, state.local_pi, phi)
            report = residuals(d, state.local_pi, phi, state.phi_prev, state.rho, state.penalty, self.options.eps_rel)
            if self.options.adaptive:
                opts = self.options
                state.penalty = adaptive_penalty(
                    state.penalty, report, opts.tau, opts.beta, self.inner_total, opts.freeze_after, opts.m0
                )
            flag = STOP_INNER if report.converged and self.last_ok else CONTINUE
            ratio = max(report.primal_ratio, report.dual_ratio)
            replies.append(
                Message(outer_iter=outer, inner_iter=inner, type=MessageType.STOP_FLAG, user=0, server=d, payload=(flag, ratio))
            )

        for m in by_type.get(MessageType.STOP_FLAG, []):
            if m.payload[0] == SHUTDOWN:
                self.running = False
            elif m.payload[0] == CONTINUE:
                replies += self._local_step(outer, inner + 1)
        return replies

class InProcessTransport:
    """Edges live in this process; batches still pass through the byte codec."""

    def __init__(self, edges: list[EdgeServer]):
        self.edges = {edge.state.server: edge for edge in edges}

    def exchange(self, batches: dict[int, list[Message]]) -> dict[int, list[Message]]:
        replies = {}
        for d in sorted(batches):
            inbound = decode_batch(encode_batch(batches[d]))
            replies[d] = decode_batch(encode_batch(self.edges[d].handle(inbound)))
        return replies

    def states(self) -> dict[int, EdgeState]:
        return {d: edge.state for d, edge in self.edges.items()}

    def close(self) -> None:
        pass


def edge_worker(conn, scenario: NetworkScenario, bs_set: list[int], options: AdmmOptions, state: EdgeState) -> None:
    """Child-process loop: decode, handle, encode, reply, then send the edge state."""
    edge = EdgeServer(scenario, bs_set, options, state)
    try:
        while edge.running:
            batch = decode_batch(conn.recv_bytes())
            conn.send_bytes(encode_batch(edge.handle(batch)))
            conn.send(edge.state)
    except EOFError:
        logger.warning(f"Server {state.server + 1} lost its coordinator connection")
    finally:
        conn.close()


class PipeTransport:
    """One process per edge server, connected by a duplex pipe."""

    def __init__(self, scenario: NetworkScenario, assignment: MecAssignment, options: AdmmOptions, states: list[EdgeState]):
        ctx = mp.get_context("spawn")
        self.conns = {}
        self.processes = []
        self._states: dict[int, EdgeState] = {}
        for state in states:
            parent, child = ctx.Pipe()
            proc = ctx.Process(
                target=edge_worker,
                args=(child, scenario, assignment.servers[state.server], options, state),
                daemon=True,
            )
            proc.start()
            child.close()
            self.conns[state.server] = parent
            self.processes.append(proc)
            self._states[state.server] = state
        logger.info(f"Started {len(self.processes)} edge server processes")

    def exchange(self, batches: dict[int, list[Message]]) -> dict[int, list[Message]]:
        for d in sorted(batches):
            self.conns[d].send_bytes(encode_batch(batches[d]))
        replies = {}
        for d in sorted(batches):
            replies[d] = decode_batch(self.conns[d].recv_bytes())
            self._states[d] = self.conns[d].recv()
        return replies

    def states(self) -> dict[int, EdgeState]:
        return self._states

    def close(self) -> None:
        for proc in self.processes:
            proc.join(timeout=5)
            if proc.is_alive():
                logger.warning(f"Edge process {proc.pid} did not exit; terminating")
                proc.terminate()
        for conn in self.conns.values():
            conn.close()


def make_transport(
    scenario: NetworkScenario, assignment: MecAssignment, options: AdmmOptions, states: list[EdgeState]
):
    if options.multiprocess and states:
        return PipeTransport(scenario, assignment, options, states)
    return InProcessTransport(
        [EdgeServer(scenario, assignment.servers[s.server], options, s) for s in states]
    )


class Coordinator:
    """Server 1: owns the macro BS, the per-user variables and the globals."""

    def __init__(
        self,
        scenario: NetworkScenario,
        assignment: MecAssignment,
        options: AdmmOptions,
        state: CoordinatorState,
        transport,
    ):
        self.scenario = scenario
        self.assignment = assignment
        self.options = options
        self.state = state
        self.transport = transport
        self.ledger: list[Message] = []
        self.outer_iter = 0
        self.inner_iter = 0
        self.inner_total = 0
        self.edge_ids = list(range(1, assignment.num_servers))

    def _exchange(self, batches: dict[int, list[Message]]) -> dict[int, list[Message]]:
        for batch in batches.values():
            self.ledger += batch
        replies = self.transport.exchange(batches)
        for batch in replies.values():
            self.ledger += batch
        return replies

    def _read_partials(self, replies: dict[int, list[Message]]) -> tuple[np.ndarray, np.ndarray]:
        N = self.scenario.num_users
        partial = np.zeros((N, len(self.edge_ids), 2))
        penalties = np.ones(len(self.edge_ids))
        for d, batch in replies.items():
            c = d - 1
            for m in batch:
                if m.type == MessageType.GLOBAL_PARTIAL_Q:
                    partial[m.user, c, 0] = m.payload[0]
                    penalties[c] = m.payload[1]
                elif m.type == MessageType.GLOBAL_PARTIAL_Y:
                    partial[m.user, c, 1] = m.payload[0]
        return partial, penalties

    def _broadcast_flag(self, outer: int, inner: int, flag: float) -> dict[int, list[Message]]:
        return self._exchange(
            {
                d: [Message(outer_iter=outer, inner_iter=inner, type=MessageType.STOP_FLAG, user=0, server=d, payload=(flag,))]
                for d in self.edge_ids
            }
        )

    def assemble_beamformers(self) -> list[np.ndarray]:
        beamformers = [v.copy() for v in self.state.beamformers]
        for d, state in self.transport.states().items():
            for k in self.assignment.servers[d]:
                beamformers[k] = state.beamformers[k].copy()
        return beamformers

    def iterate(self) -> AdmmIterate:
        edges = self.transport.states()
        return AdmmIterate(
            coordinator=self.state,
            edges=[edges[d] for d in self.edge_ids],
            outer_iter=self.outer_iter,
            inner_iter=self.inner_iter,
        )

    def _wsr(self) -> float:
        from app.services.scenario_service import scenario_service

        return scenario_service.weighted_sum_rate(
            self.scenario, BeamformingSolution(beamformers=self.assemble_beamformers())
        )

    def _inner_stage(self, outer: int, partial: np.ndarray, penalties: np.ndarray, trace: list[dict]) -> None:
        from app.services.admm_service import (
            adaptive_penalty,
            admm_service,
            global_update,
            multiplier_update,
            residuals,
        )

        opts = self.options
        st = self.state
        reference = opts.reference_wsr
        K1 = self.assignment.servers[0]
        for j in itertools.count(1):
            self.inner_iter = j
            self.inner_total += 1
            ok = admm_service.server1_update(st, self.scenario, K1)
            converged = ok
            ratio = 0.0
            if self.edge_ids:
                st.phi_prev = st.phi
                st.phi = global_update(st.xi, st.penalty, st.local_pi, partial, penalties)
                st.xi = multiplier_update(st.xi, st.penalty, st.local_pi, st.phi)
                report = residuals(0, st.local_pi, st.phi, st.phi_prev, st.xi, st.penalty, opts.eps_rel)
                if opts.adaptive:
                    st.penalty = adaptive_penalty(
                        st.penalty, report, opts.tau, opts.beta, self.inner_total, opts.freeze_after, opts.m0
                    )
                batches = {
                    d: _records(outer, j, MessageType.GLOBAL_Q, d, [(v,) for v in st.phi[:, d - 1, 0]])
                    + _records(outer, j, MessageType.GLOBAL_Y, d, [(v,) for v in st.phi[:, d - 1, 1]])
                    for d in self.edge_ids
                }
                replies = self._exchange(batches)
                flags = [m for batch in replies.values() for m in batch if m.type == MessageType.STOP_FLAG]
                converged = converged and report.converged and all(m.payload[0] == STOP_INNER for m in flags)
                ratio = max([report.primal_ratio, report.dual_ratio] + [m.payload[1] for m in flags])

            wsr = self._wsr()
            trace.append(
                {
                    "outer_iter": outer,
                    "inner_iter": j,
                    "wsr": wsr,
                    "rel_gap": abs(reference - wsr) / reference if reference else float("nan"),
                    "max_rel_residual": ratio,
                    "messages": sum(1 for m in self.ledger if m.type != MessageType.STOP_FLAG),
                }
            )
            logger.debug(f"ADMM outer {outer} inner {j}: wsr={wsr:.6f} max_rel_residual={ratio:.3e}")
            # Without edges the inner stage is the centralized approximation: one solve suffices.
            if converged or opts.inner_done(j) or not self.edge_ids:
                if self.edge_ids:
                    self._broadcast_flag(outer, j, STOP_INNER)
                return
            replies = self._broadcast_flag(outer, j, CONTINUE)
            partial, penalties = self._read_partials(replies)

    def run(self) -> list[dict]:
        """Drive outer iterations until the surrogate stops improving; returns trace rows."""
        from app.services.admm_service import admm_service

        opts = self.options
        st = self.state
        N = self.scenario.num_users
        weights = self.scenario.weights
        mu_history = [np.maximum(st.mu, 0.0)]
        trace: list[dict] = []
        try:
            for t in range(1, opts.max_outer + 1):
                self.outer_iter = t
                st.g, a_local = admm_service.local_linearization(
                    self.scenario, st.beamformers, st.u, self.assignment.servers[0]
                )
                st.w_tilde = weights * np.sqrt(1.0 + np.maximum(st.mu, 0.0))
                partial = np.zeros((N, 0, 2))
                penalties = np.zeros(0)
                a_total = a_local.copy()
                if self.edge_ids:
                    replies = self._exchange(
                        {d: _records(t, 0, MessageType.INTERFERENCE_U, d, [(u,) for u in st.u]) for d in self.edge_ids}
                    )
                    for batch in replies.values():
                        for m in batch:
                            if m.type == MessageType.SUM_A:
                                a_total[m.user] += m.payload[0]
                    partial, penalties = self._read_partials(replies)
                st.A_total = a_total
                self._inner_stage(t, partial, penalties, trace)

                mu_history.append(np.maximum(st.mu, 0.0))
                window = opts.outer_window
                if len(mu_history) > window:
                    gain = float(weights @ (np.log1p(mu_history[-1]) - np.log1p(mu_history[-1 - window])))
                    if gain <= opts.eps_ia:
                        break
        finally:
            if self.edge_ids:
                try:
                    self._broadcast_flag(self.outer_iter, 0, SHUTDOWN)
                except Exception as e:
                    logger.error(f"Error shutting down edge servers: {str(e)}")
        return trace
