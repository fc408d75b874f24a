"""Message channels between nodes.

* :meth:`ChannelHub.send` delivers a signed envelope to one or many nodes
  by unicast.  One recipient gets the payload encrypted to its public key;
  several recipients share a symmetric key wrapped once per recipient.
* Topic channels build a dissemination tree rooted at the node
  responsible for ``hash(topic)``.  Joins go to the root, which adopts the
  newcomer or forwards it to a child once it has ``fanout`` children.
  Publishes are routed to the root and flow down the tree.
* Duplicate envelopes (same message id) are dropped at the receiver.

Listeners run on the receiving node; a node that has not opened a channel
drops everything sent on it.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

from . import ids
from .crypto import DecryptionError
from .secure_items import IntegrityError, decode_list, encode_list
from .overlay import RoutingError
from .sim import Descriptor, NodeOffline, RpcTimeout

INTEGRITY = "GLOBAL_CHANNELS_INTEGRITY_FAILURES"
DELIVERED = "GLOBAL_MESSAGEDISPATCHER_DELIVERED"
PUBLISHED = "GLOBAL_CHANNELS_PUBLISHED"


@dataclass(frozen=True)
class Envelope:
    msg_id: int
    sender: int  # sender public key (= node id)
    channel: str
    recipients: tuple[int, ...]
    wrapped: tuple[bytes, ...]  # per recipient; empty for 1-to-1
    body: bytes
    signature: bytes

    def signed_part(self) -> bytes:
        return encode_list([b"env1", ids.to_bytes(self.msg_id), ids.to_bytes(self.sender),
                            self.channel.encode(), b"".join(ids.to_bytes(r) for r in self.recipients),
                            encode_list(self.wrapped), self.body])

    def wire_size(self) -> int:
        return len(self.body) + len(self.signature) + 60 + sum(20 + len(w) for w in self.wrapped)


def seal_envelope(hub: "ChannelHub", channel: str, recipients: list[int], payload: bytes) -> Envelope:
    p = hub.provider
    recipients = tuple(sorted(set(recipients)))
    hub.counter += 1
    msg_id = ids.hash160(ids.to_bytes(hub.node.node_id) + struct.pack(">Q", hub.counter))
    if len(recipients) == 1:
        wrapped, body = (), p.encrypt(recipients[0], payload)
    else:
        key = p.new_sym_key()
        wrapped = tuple(p.encrypt(r, key) for r in recipients)
        body = p.sym_encrypt(key, payload)
    env = Envelope(msg_id, hub.kp.public_key, channel, recipients, wrapped, body, b"")
    return Envelope(msg_id, env.sender, channel, recipients, wrapped, body,
                    p.sign(hub.kp, env.signed_part()))


def open_envelope(hub: "ChannelHub", env: Envelope) -> bytes:
    p = hub.provider
    if not p.verify(env.sender, env.signed_part(), env.signature):
        raise IntegrityError("envelope signature does not verify")
    me = hub.kp.public_key
    if me not in env.recipients:
        raise IntegrityError("not a recipient")
    try:
        if not env.wrapped:
            return p.decrypt(hub.kp, env.body)
        key = p.decrypt(hub.kp, env.wrapped[env.recipients.index(me)])
        return p.sym_decrypt(key, env.body)
    except DecryptionError as exc:
        raise IntegrityError("envelope does not decrypt") from exc


@dataclass
class TopicState:
    topic: str
    topic_id: int
    subscribed: bool = False
    parent: Descriptor | None = None
    children: list = None
    root: bool = False

    def __post_init__(self):
        if self.children is None:
            self.children = []


class ChannelHub:
    """Channel endpoint of one node."""

    def __init__(self, node, kp, provider, fanout: int = 8):
        self.node = node
        self.sim = node.sim
        self.kp = kp
        self.provider = provider
        self.fanout = fanout
        self.counter = 0
        self.listeners: dict[str, list[Callable]] = {}
        self.seen: dict[int, int] = {}  # msg id -> time first seen
        self.topics: dict[int, TopicState] = {}
        self.topic_listeners: dict[str, list[Callable]] = {}
        self.delivered = 0
        node.handlers.update(ch_msg=self._h_msg, ps_join=self._h_join, ps_publish=self._h_publish,
                             ps_down=self._h_down, ps_leave=self._h_leave, ps_beat=self._h_beat,
                             ps_handover=self._h_handover, ps_orphan=self._h_orphan)

    # ------------------------------------------------------------------
    # message channels
    def open(self, channel: str, listener: Callable[[int, bytes], None]):
        """Join ``channel`` locally; ``listener(sender_pub, payload)`` fires per message."""
        self.listeners.setdefault(channel, []).append(listener)

    def close(self, channel: str):
        self.listeners.pop(channel, None)

    def send(self, channel: str, recipients: list, payload: bytes):
        """Generator: deliver to each recipient; returns the node ids that acknowledged.

        Recipients are descriptors (sent directly) or bare node ids (routed).
        """
        targets = [r.node_id if isinstance(r, Descriptor) else r for r in recipients]
        env = seal_envelope(self, channel, targets, payload)
        calls = []
        for r in recipients:
            if isinstance(r, Descriptor):
                calls.append(self.node.rpc(r, "ch_msg", env))
            else:
                calls.append(self.node.spawn(self._routed(r, env)))
        replies = yield calls
        return [t for t, r in zip(targets, replies) if r is True]

    def _routed(self, node_id: int, env: Envelope):
        try:
            dest, reply = yield from self.node.route(node_id, "ch_msg", env, include_weak=True, retries=1)
        except RoutingError:
            return False
        return reply is True and dest.node_id == node_id

    def _seen(self, msg_id: int) -> bool:
        if msg_id in self.seen:
            return True
        self.seen[msg_id] = self.sim.now
        if len(self.seen) > 4096:
            cutoff = self.sim.now - 600_000
            self.seen = {m: t for m, t in self.seen.items() if t >= cutoff}
        return False

    def _h_msg(self, src, env: Envelope):
        lst = self.listeners.get(env.channel)
        if not lst or self.kp.public_key not in env.recipients:
            return False
        try:
            payload = open_envelope(self, env)
        except IntegrityError:
            self.node.metrics.count(INTEGRITY)
            return False
        if self._seen(env.msg_id):
            return True
        self.delivered += 1
        self.node.metrics.count(DELIVERED)
        for fn in list(lst):
            fn(env.sender, payload)
        return True

    # ------------------------------------------------------------------
    # topic channels
    def _state(self, topic: str) -> TopicState:
        tid = ids.name_id("topic:" + topic)
        st = self.topics.get(tid)
        if st is None:
            st = self.topics[tid] = TopicState(topic, tid)
        return st

    def subscribe(self, topic: str, listener: Callable[[bytes], None] | None = None):
        """Generator: graft this node onto the topic tree."""
        st = self._state(topic)
        st.subscribed = True
        if listener is not None:
            self.topic_listeners.setdefault(topic, []).append(listener)
        if st.parent is None and not st.root:
            yield from self._attach(st)

    def _attach(self, st: TopicState):
        # a node re-joining must not sit below one of its own descendants
        self._orphan_children(st)
        dest, reply = yield from self.node.route(st.topic_id, "ps_join", st.topic, self.node.desc, True)
        hops = 0
        while reply[0] != "adopted" and reply[0] != "root" and hops < 32:
            hops += 1
            try:
                if reply[0] == "forward":
                    dest = reply[1]
                    reply = yield self.node.rpc(dest, "ps_join", st.topic, self.node.desc, False)
                    continue
            except (RpcTimeout, NodeOffline):
                pass
            dest, reply = yield from self.node.route(st.topic_id, "ps_join", st.topic, self.node.desc, True)
        if reply[0] == "root":
            st.root = True
            st.parent = None
        else:
            st.parent = dest

    def unsubscribe(self, topic: str):
        st = self._state(topic)
        st.subscribed = False
        self.topic_listeners.pop(topic, None)
        if not st.children and not st.root:
            if st.parent is not None:
                self.node.rpc(st.parent, "ps_leave", st.topic_id)
            del self.topics[st.topic_id]

    def publish(self, topic: str, payload: bytes):
        """Generator: route the payload to the topic root for dissemination."""
        self.counter += 1
        msg_id = ids.hash160(ids.to_bytes(self.node.node_id) + struct.pack(">Q", self.counter) + b"t")
        self.node.metrics.count(PUBLISHED)
        yield from self.node.route(ids.name_id("topic:" + topic), "ps_publish", topic, msg_id, payload)
        return msg_id

    def _orphan_children(self, st: TopicState):
        for c in st.children:
            self.node.rpc(c, "ps_orphan", st.topic_id)
        st.children = []

    def _h_orphan(self, src, topic_id: int):
        st = self.topics.get(topic_id)
        if st is not None and st.parent is not None and st.parent.node_id == src.node_id:
            st.parent = None
            self.node.spawn(self._attach(st))

    def _h_join(self, src, topic: str, joiner: Descriptor, routed: bool):
        tid = ids.name_id("topic:" + topic)
        if not routed and tid not in self.topics:
            return ("retry",)
        st = self._state(topic)
        if joiner.node_id == self.node.node_id:
            st.root = True
            return ("root",)
        if routed and not st.root and st.parent is None:
            st.root = True  # the responsible node becomes the root
        if any(c.node_id == joiner.node_id for c in st.children):
            return ("adopted",)
        if len(st.children) < self.fanout:
            st.children.append(joiner)
            return ("adopted",)
        best = min(st.children, key=lambda c: ids.closeness(c.node_id, joiner.node_id))
        return ("forward", best)

    def _h_publish(self, src, topic: str, msg_id: int, payload: bytes):
        st = self.topics.get(ids.name_id("topic:" + topic))
        if st is None:
            return 0  # nobody subscribed: absorbed here
        st.root = True
        return self._disseminate(st, msg_id, payload)

    def _disseminate(self, st: TopicState, msg_id: int, payload: bytes) -> int:
        if self._seen(msg_id):
            return 0
        n = 0
        if st.subscribed:
            n = 1
            self.delivered += 1
            self.node.metrics.count(DELIVERED)
            for fn in list(self.topic_listeners.get(st.topic, ())):
                fn(payload)
        for c in list(st.children):
            self.node.rpc(c, "ps_down", st.topic, msg_id, payload)
        return n

    def _h_down(self, src, topic: str, msg_id: int, payload: bytes):
        st = self.topics.get(ids.name_id("topic:" + topic))
        if st is None:
            self.node.rpc(src, "ps_leave", ids.name_id("topic:" + topic))
            return 0
        return self._disseminate(st, msg_id, payload)

    def _h_leave(self, src, topic_id: int):
        st = self.topics.get(topic_id)
        if st is None:
            return
        st.children = [c for c in st.children if c.node_id != src.node_id]
        if not st.children and not st.subscribed and not st.root:
            if st.parent is not None:
                self.node.rpc(st.parent, "ps_leave", topic_id)
            del self.topics[topic_id]

    def _h_beat(self, src, topic_id: int):
        st = self.topics.get(topic_id)
        return st is not None and any(c.node_id == src.node_id for c in st.children)

    def _h_handover(self, src, topic: str, children: list):
        st = self._state(topic)
        if st.parent is not None:
            self.node.rpc(st.parent, "ps_leave", st.topic_id)
        st.root = True
        st.parent = None
        known = {c.node_id for c in st.children}
        for c in children:
            if c.node_id not in known and c.node_id != self.node.node_id:
                st.children.append(c)
                known.add(c.node_id)
        return True

    def maintain(self):
        """Generator run each maintenance round: check parents, move roots."""
        for tid in sorted(self.topics):
            st = self.topics.get(tid)
            if st is None:
                continue
            if st.root:
                best = self.node.closest_local(tid, 1)
                if best and best[0].node_id != self.node.node_id:
                    try:
                        yield self.node.rpc(best[0], "ps_handover", st.topic, st.children)
                        st.root = False
                        st.children = []
                        if st.subscribed:
                            yield from self._attach(st)
                        elif tid in self.topics:
                            del self.topics[tid]
                    except (RpcTimeout, NodeOffline):
                        pass
                continue
            if st.parent is None:
                if st.subscribed or st.children:
                    yield from self._attach(st)
                continue
            try:
                ok = yield self.node.rpc(st.parent, "ps_beat", tid)
            except (RpcTimeout, NodeOffline):
                ok = False
            if not ok:
                st.parent = None
                yield from self._attach(st)

    def start(self):
        self.node.spawn(self._loop())

    def _loop(self):
        period = int(self.node.cfg.maintenance_s * 1000)
        yield self.sim.sleep(self.sim.rng.randint(0, period))
        while True:
            if self.topics:
                yield from self.maintain()
            yield self.sim.sleep(period)


def encode_text(*parts: bytes) -> bytes:
    return encode_list(parts)


def decode_text(data: bytes) -> list[bytes]:
    return decode_list(data)
