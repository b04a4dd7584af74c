"""Client-dispatch backends: in-process loopback and a TCP server/client.

Both backends push every weight exchange through the binary codec, so the
wire format is exercised even in simulation, and a TCP session with the same
config and seeds produces bit-identical results to a loopback session.
"""

from __future__ import annotations

import logging
import socket
import struct
import time

from . import wire
from .errors import FramingError, TransportError
from .federation import (
    ClientUpdate,
    FederationResult,
    FLConfig,
    local_train,
    partition_iid,
    run_federation,
)
from .optim import OptimizerSpec

log = logging.getLogger(__name__)


def _round_start_msg(config: FLConfig, weights, round_index: int) -> wire.RoundStart:
    return wire.RoundStart(
        round_index=round_index,
        num_clients=config.num_clients,
        local_epochs=config.local_epochs,
        batch_size=config.batch_size,
        opt_kind=config.optimizer.kind,
        lr=config.optimizer.lr,
        weight_decay=config.optimizer.weight_decay,
        seed=config.seed,
        eval_metric=config.eval_metric,
        augment=config.augment,
        weights=weights,
    )


def _config_from_round_start(msg: wire.RoundStart) -> FLConfig:
    return FLConfig(
        architecture=msg.weights.architecture_id,
        num_clients=msg.num_clients,
        selected_per_round=1,  # selection already happened server-side
        local_epochs=msg.local_epochs,
        rounds=msg.round_index,
        batch_size=msg.batch_size,
        optimizer=OptimizerSpec(msg.opt_kind, msg.lr, msg.weight_decay),
        seed=msg.seed,
        eval_metric=msg.eval_metric,
        augment=msg.augment,
    )


class LoopbackTransport:
    """Runs selected clients sequentially in ascending id order, in-process.

    With use_wire=True (default) every RoundStart/RoundResult is serialized
    and deserialized in memory, byte-for-byte the same path as TCP.
    """

    def __init__(self, client_data: dict[int, list], use_wire: bool = True):
        self.client_data = client_data
        self.use_wire = use_wire

    def dispatch(self, config: FLConfig, weights, round_index: int, selected):
        updates = []
        for cid in sorted(selected):
            if cid not in self.client_data:
                raise TransportError(f"no shard registered for client {cid}")
            w = weights
            if self.use_wire:
                start = wire.decode_message(
                    wire.encode_message(_round_start_msg(config, weights, round_index))
                )
                w = start.weights
            upd = local_train(w, self.client_data[cid], config, cid, round_index)
            if self.use_wire:
                result = wire.decode_message(
                    wire.encode_message(
                        wire.RoundResult(
                            upd.client_id,
                            upd.round_index,
                            upd.num_samples,
                            upd.train_loss,
                            upd.weights,
                        )
                    )
                )
                upd = ClientUpdate(
                    result.client_id,
                    result.round_index,
                    result.weights,
                    result.num_samples,
                    result.train_loss,
                )
            updates.append(upd)
        return updates


def run_simulation(
    config: FLConfig,
    train_samples,
    test_samples,
    initial_weights=None,
    stop_threshold=None,
    use_wire: bool = True,
    progress=None,
) -> FederationResult:
    """Deterministic in-process federation over an IID partition of the data."""
    parts = partition_iid(len(train_samples), config.num_clients, config.seed)
    client_data = {
        cid: [train_samples[i] for i in idxs] for cid, idxs in enumerate(parts)
    }
    transport = LoopbackTransport(client_data, use_wire=use_wire)
    return run_federation(
        config,
        transport.dispatch,
        test_samples,
        initial_weights=initial_weights,
        stop_threshold=stop_threshold,
        progress=progress,
    )


# ----------------------------------------------------------------- TCP layer


def send_message(sock: socket.socket, msg):
    sock.sendall(wire.encode_message(msg))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-frame")
        buf += chunk
    return buf


def recv_message(sock: socket.socket):
    header = _recv_exact(sock, wire.HEADER_LEN)
    if header[:4] != wire.MAGIC:
        raise FramingError(f"bad magic {header[:4]!r}")
    _, plen = struct.unpack("<BI", header[4:9])
    payload = _recv_exact(sock, plen) if plen else b""
    return wire.decode_message(header + payload)


def serve(
    bind_addr: tuple[str, int],
    config: FLConfig,
    test_samples,
    initial_weights=None,
    stop_threshold=None,
    progress=None,
    ready_callback=None,
) -> FederationResult:
    """Run federated rounds over TCP.

    Waits for num_clients distinct Hello handshakes, then drives the round
    state machine, dispatching RoundStart frames and collecting RoundResult
    frames in ascending client-id order. A failed or timed-out client aborts
    the round; the global model is left unchanged. After the last round every
    client receives Shutdown.
    """
    config.validate()
    clients: dict[int, socket.socket] = {}
    server_sock = socket.create_server(bind_addr)
    try:
        if ready_callback is not None:
            ready_callback(server_sock.getsockname())
        while len(clients) < config.num_clients:
            conn, addr = server_sock.accept()
            msg = recv_message(conn)
            if not isinstance(msg, wire.Hello):
                send_message(conn, wire.Abort(0, "expected Hello"))
                conn.close()
                continue
            if msg.client_id in clients or not 0 <= msg.client_id < config.num_clients:
                send_message(conn, wire.Abort(0, f"rejected client id {msg.client_id}"))
                conn.close()
                continue
            clients[msg.client_id] = conn
            log.info("client %d connected from %s", msg.client_id, addr)

        def dispatch(cfg, weights, round_index, selected):
            start = _round_start_msg(cfg, weights, round_index)
            for cid in sorted(selected):
                send_message(clients[cid], start)
            updates = []
            for cid in sorted(selected):
                clients[cid].settimeout(cfg.round_timeout)
                try:
                    msg = recv_message(clients[cid])
                except (socket.timeout, TimeoutError) as exc:
                    raise TransportError(
                        f"client {cid} timed out in round {round_index}"
                    ) from exc
                if isinstance(msg, wire.Abort):
                    raise TransportError(
                        f"client {cid} aborted round {round_index}: {msg.reason}"
                    )
                if not isinstance(msg, wire.RoundResult):
                    raise TransportError(
                        f"client {cid}: expected RoundResult, got {type(msg).__name__}"
                    )
                if msg.client_id != cid or msg.round_index != round_index:
                    raise TransportError(
                        f"client {cid}: result for wrong round/client "
                        f"({msg.client_id}, round {msg.round_index})"
                    )
                updates.append(
                    ClientUpdate(
                        msg.client_id,
                        msg.round_index,
                        msg.weights,
                        msg.num_samples,
                        msg.train_loss,
                    )
                )
            return updates

        def on_round(record):
            if record.error is None:
                report = wire.EvalReport(record.round_index, record.metric, record.loss)
                for conn in clients.values():
                    send_message(conn, report)
            else:
                for conn in clients.values():
                    try:
                        send_message(conn, wire.Abort(record.round_index, record.error))
                    except OSError:
                        pass
            if progress is not None:
                progress(record)

        result = run_federation(
            config,
            dispatch,
            test_samples,
            initial_weights=initial_weights,
            stop_threshold=stop_threshold,
            progress=on_round,
        )
        for conn in clients.values():
            try:
                send_message(conn, wire.Shutdown())
            except OSError:
                pass  # client already gone (e.g. it aborted earlier)
        return result
    finally:
        for conn in clients.values():
            conn.close()
        server_sock.close()


def client_run(
    server_addr: tuple[str, int],
    client_id: int,
    train_samples,
    expected_arch: str | None = None,
    max_attempts: int = 3,
) -> int:
    """Participate in federated rounds until Shutdown. Returns a process exit code.

    The local shard is derived from the RoundStart's (num_clients, seed) via
    the same IID partition the simulation uses, so networked and simulated
    runs train on identical data.
    """
    delay = 0.5
    sock = None
    for attempt in range(max_attempts):
        try:
            sock = socket.create_connection(server_addr, timeout=30)
            break
        except OSError as exc:
            log.warning("connect attempt %d failed: %s", attempt + 1, exc)
            if attempt == max_attempts - 1:
                return 1
            time.sleep(delay)
            delay *= 2
    sock.settimeout(None)
    try:
        send_message(sock, wire.Hello(client_id))
        while True:
            msg = recv_message(sock)
            if isinstance(msg, wire.Shutdown):
                return 0
            if isinstance(msg, wire.EvalReport):
                log.info(
                    "round %d: metric=%.4f loss=%.4f", msg.round_index, msg.metric, msg.loss
                )
                continue
            if isinstance(msg, wire.Abort):
                log.warning("round %d aborted by server: %s", msg.round_index, msg.reason)
                continue
            if not isinstance(msg, wire.RoundStart):
                log.error("unexpected message %s", type(msg).__name__)
                return 1
            if expected_arch and msg.weights.architecture_id != expected_arch:
                send_message(
                    sock,
                    wire.Abort(
                        msg.round_index,
                        f"architecture mismatch: expected {expected_arch}, "
                        f"got {msg.weights.architecture_id}",
                    ),
                )
                return 1
            cfg = _config_from_round_start(msg)
            shard_idx = partition_iid(len(train_samples), cfg.num_clients, cfg.seed)[client_id]
            shard = [train_samples[i] for i in shard_idx]
            upd = local_train(msg.weights, shard, cfg, client_id, msg.round_index)
            send_message(
                sock,
                wire.RoundResult(
                    upd.client_id,
                    upd.round_index,
                    upd.num_samples,
                    upd.train_loss,
                    upd.weights,
                ),
            )
    except TransportError as exc:
        log.error("transport failure: %s", exc)
        return 1
    finally:
        sock.close()
