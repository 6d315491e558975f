"""Two-party message channel with framing and cost accounting.

Wire format: 4-byte little-endian payload length, then one byte each of
message type, phase tag and step tag, then the payload.  Loopback channels
pass the identical byte encoding through in-process queues so byte counts
are bit-exact with TCP.

Accounting: every byte is attributed to the (phase, step) cell stamped on
the frame.  A concurrent symmetric exchange counts as one round; a one-way
transfer counts one round at each end.
"""

from __future__ import annotations

import copy
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

HEADER_LEN = 7
DEFAULT_MAX_FRAME = 256 * 1024 * 1024

# message type registry (fixed table, wire-stable)
MSG_SHARE_OPEN = 1
MSG_TRIPLE_SHARE = 2
MSG_CIPHERTEXT = 3
MSG_PUBLIC_KEY = 4
MSG_CONTROL = 5
MSG_METRICS = 6
KNOWN_MSG_TYPES = frozenset(
    (MSG_SHARE_OPEN, MSG_TRIPLE_SHARE, MSG_CIPHERTEXT, MSG_PUBLIC_KEY,
     MSG_CONTROL, MSG_METRICS))

PHASE_OFFLINE = 0
PHASE_ONLINE = 1

STEP_OTHER = 0
STEP_S1 = 1
STEP_S2 = 2
STEP_S3 = 3

ROLE_A = "A"
ROLE_B = "B"


class ChannelError(ConnectionError):
    pass


class ChannelClosed(ChannelError):
    pass


class FrameTooLarge(ChannelError):
    pass


@dataclass
class Frame:
    msg_type: int
    payload: bytes
    phase: int = PHASE_ONLINE
    step: int = STEP_OTHER

    def encode(self) -> bytes:
        return struct.pack("<IBBB", len(self.payload), self.msg_type,
                           self.phase, self.step) + self.payload

    @classmethod
    def decode_header(cls, hdr: bytes) -> tuple[int, int, int, int]:
        length, msg_type, phase, step = struct.unpack("<IBBB", hdr)
        if msg_type not in KNOWN_MSG_TYPES:
            raise ChannelError(f"unknown message type {msg_type}")
        return length, msg_type, phase, step


@dataclass
class MetricCell:
    bytes_sent: int = 0
    bytes_received: int = 0
    rounds: int = 0
    seconds: float = 0.0


@dataclass
class RunMetrics:
    """Per-(phase, step) byte/round/time counters."""

    cells: dict = field(default_factory=dict)

    def cell(self, phase: int, step: int) -> MetricCell:
        key = (phase, step)
        if key not in self.cells:
            self.cells[key] = MetricCell()
        return self.cells[key]

    def add_time(self, phase: int, step: int, seconds: float):
        self.cell(phase, step).seconds += seconds

    def snapshot(self) -> "RunMetrics":
        return copy.deepcopy(self)

    def totals(self) -> MetricCell:
        t = MetricCell()
        for c in self.cells.values():
            t.bytes_sent += c.bytes_sent
            t.bytes_received += c.bytes_received
            t.rounds += c.rounds
            t.seconds += c.seconds
        return t

    def to_dict(self) -> dict:
        names = {PHASE_OFFLINE: "offline", PHASE_ONLINE: "online"}
        steps = {STEP_OTHER: "other", STEP_S1: "S1", STEP_S2: "S2", STEP_S3: "S3"}
        out: dict = {}
        for (phase, step), c in sorted(self.cells.items()):
            out.setdefault(names[phase], {})[steps[step]] = {
                "bytes_sent": c.bytes_sent,
                "bytes_received": c.bytes_received,
                "rounds": c.rounds,
                "seconds": c.seconds,
            }
        return out


class Channel:
    """One party's end of an ordered reliable two-party link."""

    def __init__(self, role: str, max_frame: int = DEFAULT_MAX_FRAME):
        if role not in (ROLE_A, ROLE_B):
            raise ValueError("role must be 'A' or 'B'")
        self.role = role
        self.max_frame = max_frame
        self.metrics = RunMetrics()
        self._phase = PHASE_ONLINE
        self._step = STEP_OTHER
        self.transcript: list[Frame] | None = None  # set to [] to record

    # -- context ----------------------------------------------------------
    def set_context(self, phase: int, step: int):
        self._phase = phase
        self._step = step

    def metrics_snapshot(self) -> RunMetrics:
        return self.metrics.snapshot()

    # -- raw IO (implemented by subclasses) --------------------------------
    def _write(self, data: bytes):
        raise NotImplementedError

    def _read(self, n: int) -> bytes:
        raise NotImplementedError

    def close(self):
        pass

    # -- framed IO ----------------------------------------------------------
    def _stamp(self, frame_or_payload, msg_type: int) -> Frame:
        if isinstance(frame_or_payload, Frame):
            f = frame_or_payload
            f.phase, f.step = self._phase, self._step
            return f
        return Frame(msg_type, frame_or_payload, self._phase, self._step)

    def _send_counted(self, f: Frame):
        if len(f.payload) > self.max_frame:
            raise FrameTooLarge(f"payload {len(f.payload)} > max {self.max_frame}")
        data = f.encode()
        self._write(data)
        self.metrics.cell(f.phase, f.step).bytes_sent += len(data)

    def _recv_counted(self) -> Frame:
        hdr = self._read(HEADER_LEN)
        length, msg_type, phase, step = Frame.decode_header(hdr)
        if length > self.max_frame:
            raise FrameTooLarge(f"incoming payload {length} > max {self.max_frame}")
        payload = self._read(length) if length else b""
        f = Frame(msg_type, payload, phase, step)
        self.metrics.cell(phase, step).bytes_received += HEADER_LEN + length
        if self.transcript is not None:
            self.transcript.append(f)
        return f

    def send(self, payload, msg_type: int = MSG_SHARE_OPEN):
        """One-way transfer; counts one round at the sender."""
        f = self._stamp(payload, msg_type)
        self._send_counted(f)
        self.metrics.cell(f.phase, f.step).rounds += 1

    def recv(self) -> Frame:
        f = self._recv_counted()
        self.metrics.cell(f.phase, f.step).rounds += 1
        return f

    def exchange(self, payload, msg_type: int = MSG_SHARE_OPEN) -> Frame:
        """Concurrent symmetric send+recv, counted as a single round."""
        f = self._stamp(payload, msg_type)
        err: list[BaseException] = []

        def _tx():
            try:
                self._send_counted(f)
            except BaseException as e:  # propagated after recv
                err.append(e)

        t = threading.Thread(target=_tx, daemon=True)
        t.start()
        try:
            got = self._recv_counted()
        finally:
            t.join()
        if err:
            raise err[0]
        self.metrics.cell(f.phase, f.step).rounds += 1
        return got


class LoopbackChannel(Channel):
    def __init__(self, role: str, tx: queue.Queue, rx: queue.Queue,
                 max_frame: int = DEFAULT_MAX_FRAME):
        super().__init__(role, max_frame)
        self._tx = tx
        self._rx = rx
        self._buf = b""
        self._closed = False

    def _write(self, data: bytes):
        if self._closed:
            raise ChannelClosed("channel closed")
        self._tx.put(data)

    def _read(self, n: int) -> bytes:
        while len(self._buf) < n:
            if self._closed:
                raise ChannelClosed("channel closed")
            item = self._rx.get()
            if item is None:
                self._closed = True
                raise ChannelClosed("peer closed")
            self._buf += item
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def close(self):
        if not self._closed:
            self._closed = True
            self._tx.put(None)


def loopback_pair(max_frame: int = DEFAULT_MAX_FRAME) -> tuple[Channel, Channel]:
    """Connected in-process channel pair (A end, B end)."""
    q_ab: queue.Queue = queue.Queue()
    q_ba: queue.Queue = queue.Queue()
    a = LoopbackChannel(ROLE_A, q_ab, q_ba, max_frame)
    b = LoopbackChannel(ROLE_B, q_ba, q_ab, max_frame)
    return a, b


class TcpChannel(Channel):
    def __init__(self, role: str, sock: socket.socket,
                 max_frame: int = DEFAULT_MAX_FRAME):
        super().__init__(role, max_frame)
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._wlock = threading.Lock()

    def _write(self, data: bytes):
        try:
            with self._wlock:
                self._sock.sendall(data)
        except OSError as e:
            raise ChannelClosed(str(e)) from e

    def _read(self, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            try:
                chunk = self._sock.recv(min(n - got, 1 << 20))
            except OSError as e:
                raise ChannelClosed(str(e)) from e
            if not chunk:
                raise ChannelClosed("peer closed connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def connect(role: str, endpoint: str, timeout: float = 30.0,
            max_frame: int = DEFAULT_MAX_FRAME) -> Channel:
    """Open the TCP link for one role.

    Role A binds and listens on endpoint; role B connects (retrying until
    the deadline so start order does not matter).  Returns a channel with a
    fresh RunMetrics object.
    """
    host, port_s = endpoint.rsplit(":", 1)
    port = int(port_s)
    deadline = time.monotonic() + timeout
    if role == ROLE_A:
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(1)
        srv.settimeout(timeout)
        try:
            sock, _ = srv.accept()
        except socket.timeout as e:
            raise ChannelError(f"timeout waiting for peer on {endpoint}") from e
        finally:
            srv.close()
        return TcpChannel(role, sock, max_frame)
    last: Exception | None = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection((host, port), timeout=1.0)
            sock.settimeout(None)
            return TcpChannel(role, sock, max_frame)
        except OSError as e:
            last = e
            time.sleep(0.05)
    raise ChannelError(f"could not reach {endpoint}: {last}")
