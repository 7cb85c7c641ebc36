"""Prediction-driven pose streaming over TCP or UDP.

``PoseEmitter`` turns measured poses into a fixed-rate message sequence;
``PoseStreamer`` runs it on a wall clock and hands messages to a sender
thread through a small drop-oldest channel, so a slow consumer costs
messages, never computing time.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from ..interpolation import PredictionState, TimedPose, TrackingStale, predict
from .protocol import PoseMessage, encode_pose

log = logging.getLogger(__name__)

DEFAULT_RATE_HZ = 46.0
DEFAULT_STALE_CAP_MS = 100.0
DEFAULT_QUEUE_SIZE = 16


class PoseEmitter:
    """Prediction stage: measured poses in, one message (or nothing) per tick.

    Until ``stale_cap`` past the newest measurement a tick yields the
    extrapolated pose. After that the last pose is repeated with the stale
    flag for another ``stale_cap``, then ticks yield nothing until a new
    measurement arrives.
    """

    def __init__(self, stale_cap_us: int = int(DEFAULT_STALE_CAP_MS * 1000)):
        self.stale_cap_us = int(stale_cap_us)
        self.state = PredictionState(max_extrapolation=self.stale_cap_us)
        self.sequence = 0
        self.last: TimedPose | None = None

    def update(self, measured: TimedPose) -> None:
        self.state.update(measured)

    def tick(self, t_us: int) -> PoseMessage | None:
        latest = self.state.latest
        if latest is None or t_us < latest.timestamp:
            return None
        stale = False
        if not self.state.ready:
            # a single measurement: hold it until the cap
            if t_us - latest.timestamp > self.stale_cap_us:
                return None
            tp = TimedPose(t_us, latest.pose, latest.source)
        else:
            try:
                tp = predict(self.state, t_us)
            except TrackingStale:
                if t_us - latest.timestamp > 2 * self.stale_cap_us or self.last is None:
                    return None
                stale = True
                tp = TimedPose(t_us, self.last.pose, self.last.source)
        if not stale:
            self.last = tp
        msg = PoseMessage.from_timed_pose(self.sequence, tp, stale)
        self.sequence += 1
        return msg


# -- transports ---------------------------------------------------------------


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


class UdpTransport:
    """One message per datagram, fire and forget."""

    def __init__(self, endpoint: str):
        self.address = parse_endpoint(endpoint)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.gaps = 0

    def send(self, payload: bytes) -> bool:
        try:
            self.sock.sendto(payload, self.address)
            return True
        except OSError:
            self.gaps += 1
            return False

    def close(self) -> None:
        self.sock.close()


class TcpTransport:
    """Back-to-back records on a stream socket, reconnecting with backoff.

    Messages offered while disconnected are dropped; each outage counts as
    one gap.
    """

    def __init__(self, endpoint: str, initial_backoff: float = 0.05, max_backoff: float = 1.0,
                 connect_timeout: float = 1.0):
        self.address = parse_endpoint(endpoint)
        self.initial_backoff = initial_backoff
        self.max_backoff = max_backoff
        self.connect_timeout = connect_timeout
        self.sock: socket.socket | None = None
        self.gaps = 0
        self.lost = 0
        self._backoff = initial_backoff
        self._retry_at = 0.0
        self._connected_once = False

    def _connect(self) -> bool:
        now = time.monotonic()
        if now < self._retry_at:
            return False
        try:
            sock = socket.create_connection(self.address, timeout=self.connect_timeout)
        except OSError:
            self._retry_at = now + self._backoff
            self._backoff = min(2 * self._backoff, self.max_backoff)
            return False
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self._backoff = self.initial_backoff
        self._connected_once = True
        return True

    def send(self, payload: bytes) -> bool:
        if self.sock is None and not self._connect():
            self.lost += 1
            return False
        try:
            self.sock.sendall(payload)
            return True
        except OSError:
            log.warning("pose stream to %s:%d lost; reconnecting", *self.address)
            self.sock.close()
            self.sock = None
            self.gaps += 1
            self.lost += 1
            self._retry_at = time.monotonic() + self._backoff
            return False

    def close(self) -> None:
        if self.sock is not None:
            self.sock.close()
            self.sock = None


class CallbackTransport:
    """Hands each encoded message to a Python callable (tests, in-process sinks)."""

    def __init__(self, fn):
        self.fn = fn
        self.gaps = 0

    def send(self, payload: bytes) -> bool:
        self.fn(payload)
        return True

    def close(self) -> None:
        pass


# -- bounded channel + streamer -----------------------------------------------


class DropOldestChannel:
    """Holds at most ``capacity`` undelivered messages, counting one being sent.

    ``put`` never blocks: when full, the oldest queued message is discarded.
    """

    def __init__(self, capacity: int = DEFAULT_QUEUE_SIZE):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque()
        self._in_flight = 0
        self._cond = threading.Condition()
        self.drops = 0
        self.closed = False

    def put(self, item) -> None:
        with self._cond:
            if len(self._items) + self._in_flight >= self.capacity:
                if self._items:
                    self._items.popleft()
                    self.drops += 1
                else:  # everything in flight; the new item is the one that loses
                    self.drops += 1
                    return
            self._items.append(item)
            self._cond.notify()

    def take(self, timeout: float | None = None):
        """Next item, marked in flight until :meth:`done`; None on close/timeout."""
        with self._cond:
            if not self._cond.wait_for(lambda: self._items or self.closed, timeout):
                return None
            if not self._items:
                return None
            self._in_flight += 1
            return self._items.popleft()

    def done(self) -> None:
        with self._cond:
            self._in_flight -= 1
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def drain(self, timeout: float) -> None:
        with self._cond:
            self._cond.wait_for(lambda: not self._items and not self._in_flight, timeout)

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


@dataclass
class StreamStats:
    sent: int = 0
    stale: int = 0
    drops: int = 0
    gaps: int = 0
    send_failures: int = 0
    last_sequence: int = -1
    emitted: list = field(default_factory=list)  # kept only when record=True


class PoseStreamer:
    """Ticks the prediction stage at ``rate`` Hz on the wall clock.

    Measured poses arrive through :meth:`submit` (thread-safe, non-blocking);
    only the ticker thread touches the emitter. ``clock`` maps wall time to
    the sensor timeline in microseconds.
    """

    def __init__(self, transport, rate: float = DEFAULT_RATE_HZ,
                 stale_cap_ms: float = DEFAULT_STALE_CAP_MS,
                 queue_size: int = DEFAULT_QUEUE_SIZE, clock=None, record: bool = False):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.transport = transport
        self.period = 1.0 / rate
        self.emitter = PoseEmitter(int(stale_cap_ms * 1000))
        self.channel = DropOldestChannel(queue_size)
        self.stats = StreamStats()
        self.record = record
        self._inbox: deque = deque()
        self._stop = threading.Event()
        t0 = time.monotonic()
        self.clock = clock or (lambda: int((time.monotonic() - t0) * 1e6))
        self._ticker = threading.Thread(target=self._tick_loop, name="pose-predict", daemon=True)
        self._sender = threading.Thread(target=self._send_loop, name="pose-send", daemon=True)

    def start(self) -> PoseStreamer:
        self._ticker.start()
        self._sender.start()
        return self

    def submit(self, measured: TimedPose) -> None:
        self._inbox.append(measured)

    def _tick_loop(self) -> None:
        start = time.monotonic()
        j = 0
        while not self._stop.is_set():
            while self._inbox:
                m = self._inbox.popleft()
                try:
                    self.emitter.update(m)
                except ValueError:
                    log.debug("out-of-order measurement at %d ignored", m.timestamp)
            msg = self.emitter.tick(self.clock())
            if msg is not None:
                if msg.stale:
                    self.stats.stale += 1
                if self.record:
                    self.stats.emitted.append(msg)
                self.channel.put(msg)
            j += 1
            delay = start + j * self.period - time.monotonic()
            if delay > 0:
                self._stop.wait(delay)

    def _send_loop(self) -> None:
        while True:
            msg = self.channel.take(timeout=0.1)
            if msg is None:
                if self.channel.closed:
                    return
                continue
            try:
                if self.transport.send(encode_pose(msg)):
                    self.stats.sent += 1
                    self.stats.last_sequence = msg.sequence
                else:
                    self.stats.send_failures += 1
            finally:
                self.channel.done()

    def stop(self, drain_timeout: float = 1.0) -> StreamStats:
        self._stop.set()
        if self._ticker.is_alive():
            self._ticker.join()
        self.channel.drain(drain_timeout)
        self.channel.close()
        if self._sender.is_alive():
            self._sender.join(timeout=drain_timeout + 1.0)
        self.transport.close()
        self.stats.drops = self.channel.drops
        self.stats.gaps = getattr(self.transport, "gaps", 0)
        return self.stats
