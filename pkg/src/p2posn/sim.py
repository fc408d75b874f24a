"""Deterministic discrete-event kernel, simulated network and RPC layer.

Protocol code is written as generators.  A generator yields

* a :class:`Future` and is resumed with its value (or the error is thrown in),
* a list of futures and is resumed with a list of values, with failed
  entries replaced by their exception instances.

Nested protocol steps use ``yield from``; independent work that should run
concurrently is started with :meth:`Simulator.spawn`.
"""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass
from types import GeneratorType
from typing import Any, Callable, Generator


class SimError(Exception):
    pass


class RpcTimeout(SimError):
    pass


class NodeOffline(SimError):
    pass


class Killed(SimError):
    """Raised into processes whose owner went offline."""


class Future:
    __slots__ = ("done", "value", "error", "_callbacks")

    def __init__(self):
        self.done = False
        self.value = None
        self.error: BaseException | None = None
        self._callbacks: list[Callable[[Future], None]] | None = None

    def set_result(self, value=None):
        if self.done:
            return
        self.done = True
        self.value = value
        self._fire()

    def set_error(self, error: BaseException):
        if self.done:
            return
        self.done = True
        self.error = error
        self._fire()

    def _fire(self):
        cbs = self._callbacks
        if cbs:
            self._callbacks = None
            for cb in cbs:
                cb(self)

    def add_callback(self, cb):
        if self.done:
            cb(self)
        elif self._callbacks is None:
            self._callbacks = [cb]
        else:
            self._callbacks.append(cb)

    def result(self):
        if not self.done:
            raise SimError("future not resolved")
        if self.error is not None:
            raise self.error
        return self.value


def resolved(value=None) -> Future:
    f = Future()
    f.set_result(value)
    return f


def gather(futures: list[Future]) -> Future:
    """Future for the list of results; failures appear as exception instances."""
    out = Future()
    n = len(futures)
    if n == 0:
        out.set_result([])
        return out
    results: list[Any] = [None] * n
    remaining = [n]

    def make_cb(i):
        def cb(f):
            results[i] = f.error if f.error is not None else f.value
            remaining[0] -= 1
            if remaining[0] == 0:
                out.set_result(results)
        return cb

    for i, f in enumerate(futures):
        f.add_callback(make_cb(i))
    return out


class Process(Future):
    __slots__ = ("sim", "gen", "owner", "epoch")

    def __init__(self, sim: "Simulator", gen: Generator, owner=None):
        super().__init__()
        self.sim = sim
        self.gen = gen
        self.owner = owner
        self.epoch = owner.epoch if owner is not None else 0

    def _alive(self):
        o = self.owner
        return o is None or (o.online and o.epoch == self.epoch)

    def _resume(self, fut: Future):
        if fut.error is not None:
            self._step(None, fut.error)
        else:
            self._step(fut.value, None)

    def _step(self, value, error):
        if not self._alive():
            self.gen.close()
            self.set_error(Killed())
            return
        try:
            if error is not None:
                y = self.gen.throw(error)
            else:
                y = self.gen.send(value)
        except StopIteration as stop:
            self.set_result(stop.value)
            return
        except Exception as exc:  # noqa: BLE001 - surfaced through the future
            self.set_error(exc)
            return
        if isinstance(y, Future):
            if y.done:
                self.sim.call_soon(self._resume, y)
            else:
                y.add_callback(self._resume)
        elif isinstance(y, list):
            g = gather(y)
            if g.done:
                self.sim.call_soon(self._resume, g)
            else:
                g.add_callback(self._resume)
        else:
            self.gen.close()
            self.set_error(SimError(f"process yielded unsupported value {y!r}"))


class Simulator:
    def __init__(self, seed: int = 0):
        self.now = 0  # milliseconds
        self.rng = random.Random(seed)
        self._queue: list = []
        self._seq = 0
        self.events_run = 0

    def schedule(self, delay_ms: int, fn, *args):
        self._seq += 1
        heapq.heappush(self._queue, (self.now + delay_ms, self._seq, fn, args))

    def call_soon(self, fn, *args):
        self.schedule(0, fn, *args)

    def sleep(self, delay_ms: int) -> Future:
        f = Future()
        self.schedule(delay_ms, f.set_result, None)
        return f

    def spawn(self, gen: Generator, owner=None) -> Process:
        p = Process(self, gen, owner)
        self.call_soon(p._step, None, None)
        return p

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None):
        q = self._queue
        pop = heapq.heappop
        while q:
            t = q[0][0]
            if until is not None and t > until:
                break
            _, _, fn, args = pop(q)
            self.now = t
            fn(*args)
            self.events_run += 1
            if stop is not None and stop():
                return
        if until is not None and self.now < until:
            self.now = until

    def run_process(self, gen: Generator, owner=None, limit_ms: int = 10**9):
        """Spawn ``gen`` and advance time until it finishes; return its value."""
        p = self.spawn(gen, owner)
        self.run(until=self.now + limit_ms, stop=lambda: p.done)
        return p.result()


@dataclass(frozen=True, slots=True)
class Descriptor:
    """How to reach a node: its id, simulator address and weak flag."""
    node_id: int
    addr: int
    weak: bool = False


def wire_size(obj) -> int:
    """Rough serialized size used for traffic accounting."""
    if obj is None or obj is True or obj is False:
        return 1
    t = type(obj)
    if t is int:
        return 20 if obj >= 1 << 32 else 4
    if t is bytes:
        return len(obj) + 4
    if t is str:
        return len(obj) + 4
    if t is tuple or t is list:
        n = 4
        for o in obj:
            to = type(o)
            if to is Descriptor:
                n += 26
            elif to is int:
                n += 20 if o >= 1 << 32 else 4
            else:
                n += wire_size(o)
        return n
    if t is dict:
        return sum(wire_size(k) + wire_size(v) for k, v in obj.items()) + 4
    if t is float:
        return 8
    if t is Descriptor:
        return 26
    size = getattr(obj, "wire_size", None)
    if size is not None:
        return size()
    return 16


class Network:
    def __init__(self, sim: Simulator, latency: tuple[int, int] = (10, 50), loss: float = 0.0):
        self.sim = sim
        self.lat_lo, self.lat_hi = latency
        # choice() over the range draws exactly what randint(lo, hi) would
        self._latencies = range(int(self.lat_lo), int(self.lat_hi) + 1)
        self.loss = loss
        self.endpoints: dict[int, "Endpoint"] = {}
        self.interceptors: list[Callable] = []
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.bytes_sent = 0

    @property
    def in_flight(self):
        return self.sent - self.delivered - self.dropped

    def attach(self, ep: "Endpoint"):
        ep.addr = len(self.endpoints) + 1
        self.endpoints[ep.addr] = ep

    def send(self, src: int, dst: int, msg: tuple, size: int):
        self.sent += 1
        self.bytes_sent += size
        for hook in self.interceptors:
            msg = hook(src, dst, msg)
            if msg is None:
                self.dropped += 1
                return
        rng = self.sim.rng
        if self.loss and rng.random() < self.loss:
            self.dropped += 1
            return
        self.sim.schedule(rng.choice(self._latencies), self._deliver, dst, msg, size)

    def _deliver(self, dst, msg, size):
        ep = self.endpoints.get(dst)
        if ep is None or not ep.online:
            self.dropped += 1
            return
        self.delivered += 1
        ep._receive(msg, size)


class RemoteError(SimError):
    pass


class Endpoint:
    """A network participant with request/response messaging.

    Handlers are registered per method name; they return a value or a
    generator (run as a process whose return value becomes the reply).
    """

    default_timeout = 1500
    system_methods: frozenset = frozenset()  # not counted as application traffic

    def __init__(self, sim: Simulator, net: Network, node_id: int, weak: bool = False):
        self.sim = sim
        self.net = net
        self.online = False
        self.epoch = 0
        self.addr = 0
        net.attach(self)
        self.desc = Descriptor(node_id, self.addr, weak)
        self.node_id = node_id
        self.handlers: dict[str, Callable] = {}
        self._pending: dict[int, Future] = {}
        self._rid = 0
        self.rx_msgs = 0
        self.rx_bytes = 0
        self.tx_msgs = 0
        self.app_rx = 0

    # lifecycle ---------------------------------------------------------
    def go_online(self):
        self.online = True
        self.epoch += 1

    def go_offline(self):
        self.online = False
        self.epoch += 1
        pending, self._pending = self._pending, {}
        for f in pending.values():
            f.set_error(NodeOffline())

    def spawn(self, gen) -> Process:
        return self.sim.spawn(gen, owner=self)

    # messaging ---------------------------------------------------------
    def rpc(self, dest: Descriptor, method: str, *args, timeout: int | None = None) -> Future:
        fut = Future()
        if not self.online:
            fut.set_error(NodeOffline())
            return fut
        self._rid += 1
        rid = self._rid
        self._pending[rid] = fut
        msg = ("req", self.desc, rid, method, args)
        self.tx_msgs += 1
        self.net.send(self.addr, dest.addr, msg, 40 + wire_size(args))
        self.sim.schedule(timeout or self.default_timeout, self._timeout, rid, dest)
        return fut

    def _timeout(self, rid, dest):
        fut = self._pending.pop(rid, None)
        if fut is not None:
            self.on_timeout(dest)
            fut.set_error(RpcTimeout(dest))

    def on_timeout(self, dest: Descriptor):
        pass

    def on_contact(self, desc: Descriptor):
        pass

    def _receive(self, msg, size):
        self.rx_msgs += 1
        self.rx_bytes += size
        if msg[0] == "req":
            _, src, rid, method, args = msg
            if method not in self.system_methods:
                self.app_rx += 1
            self.on_contact(src)
            handler = self.handlers.get(method)
            if handler is None:
                self._reply(src, rid, False, RemoteError(f"no handler {method}"))
                return
            try:
                out = handler(src, *args)
            except Exception as exc:  # noqa: BLE001
                self._reply(src, rid, False, exc)
                return
            if type(out) is GeneratorType:
                proc = self.spawn(out)
                proc.add_callback(lambda f: self._reply(
                    src, rid, f.error is None, f.error if f.error is not None else f.value))
            else:
                self._reply(src, rid, True, out)
        else:
            _, src, rid, ok, value = msg
            self.on_contact(src)
            fut = self._pending.pop(rid, None)
            if fut is None:
                self.on_late_reply(src)
                return
            if ok:
                fut.set_result(value)
            else:
                fut.set_error(value)

    def on_late_reply(self, src):
        pass

    def _reply(self, dest, rid, ok, value):
        if not self.online:
            return
        if isinstance(value, Killed):
            return
        self.tx_msgs += 1
        self.net.send(self.addr, dest.addr, ("rep", self.desc, rid, ok, value), 40 + wire_size(value))
