"""Social network operations built from storage, lists, secure items,
groups and channels.

Each user owns a handful of named lists (friends, inbox, wall, albums,
...), all addressed by ``"<user id hex>__<Name>"``.  Content meant for
friends is sealed to the user's *friends group*, a group principal whose
key item is sealed to every friend.  A wall author who does not know the
wall owner's friends can therefore still seal a post for them.

Actions named after the workload table (``PHOTOS_CREATE_ALBUM`` ...) are
listed in :data:`ACTIONS`; :meth:`User.perform` runs one by name.
"""
from __future__ import annotations

import struct
from collections import Counter

from . import ids
from .dds import Dds, DdsError, Pht
from .identity import make_user_id, publish_mapping, resolve_user
from .secure_items import (PUBLIC, AccessDenied, Group, IntegrityError, Keyring,
                           SecureStorageItem, UnknownPrincipal, add_member, create_group, decode_list, encode_list,
                           group_key_location, open_steps, remove_member, seal, seal_group_key, tombstone)
from .sim import Future
from .storage import ANY, NotFound, StorageError, make_object, successor


class Skip(Exception):
    """The action's precondition does not hold in the current state."""


def struct_name(uid: int, what: str) -> str:
    return f"{uid:040x}__{what}"


def friends_group_id(uid: int) -> int:
    return ids.hash160(b"friends" + ids.to_bytes(uid))


def group_record_id(gid: int) -> int:
    return ids.hash160(b"grouprec" + ids.to_bytes(gid))


def private_profile_id(node_id: int) -> int:
    return ids.hash160(b"profile" + ids.to_bytes(node_id))


def ballot_id(vid: int, uid: int) -> int:
    """One ballot slot per (voting, user): a second ballot can only replace the first."""
    return ids.hash160(ids.to_bytes(vid) + ids.to_bytes(uid))


def _encode_fields(fields: dict) -> bytes:
    return encode_list([k.encode() + b"=" + str(v).encode() for k, v in sorted(fields.items())])


def _decode_fields(payload: bytes) -> dict:
    out = {}
    for f in decode_list(payload):
        k, _, v = f.decode().partition("=")
        out[k] = v
    return out


def _u32(v: int) -> bytes:
    return struct.pack(">I", v)


def field_key(value, uid: int, bits: int = 64) -> int:
    """Order-preserving search key: value prefix in the high bits, user id bits below."""
    vbits = bits - 24
    if isinstance(value, int):
        vpart = min(value, (1 << vbits) - 1)
    else:
        raw = str(value).lower().encode()[: vbits // 8].ljust(vbits // 8, b"\0")
        vpart = int.from_bytes(raw, "big")
    return (vpart << 24) | (uid & 0xFFFFFF)


def field_range(lo, hi, bits: int = 64) -> tuple[int, int]:
    return field_key(lo, 0, bits), field_key(hi, 0xFFFFFF, bits)


SEARCH_FIELDS = ("name", "city", "country", "gender", "age")

# action name -> (method, metric counter)
ACTIONS = {
    "FRIENDS_REQUEST": ("friend_request_random", "GLOBAL_PLUGIN_FRIENDS_FRIENDSHIPREQUEST"),
    "MESSAGING_SEND_MESSAGE": ("send_message", "GLOBAL_PLUGIN_MESSAGING_SENDMESSAGE"),
    "MESSAGING_VIEW_INBOX": ("view_inbox", "GLOBAL_PLUGIN_MESSAGING_VIEWINBOX"),
    "MESSAGING_VIEW_OUTBOX": ("view_outbox", "GLOBAL_PLUGIN_MESSAGING_VIEWOUTBOX"),
    "LIVECHAT_SEND_INVITATION": ("chat_invite", "GLOBAL_PLUGIN_LIVECHAT_SENDINVITATION"),
    "LIVECHAT_SEND_MESSAGE": ("chat_message", "GLOBAL_PLUGIN_LIVECHAT_SENDMESSAGE"),
    "LIVECHAT_LEAVE": ("chat_leave", "GLOBAL_PLUGIN_LIVECHAT_LEAVE"),
    "GROUPS_CREATE_GROUP": ("create_group", "GLOBAL_PLUGIN_GROUPS_CREATEGROUP"),
    "GROUPS_INVITE_FRIEND": ("invite_to_group", "GLOBAL_PLUGIN_GROUPS_INVITEFRIEND"),
    "GROUPS_VIEW_GROUP": ("view_group", "GLOBAL_PLUGIN_GROUPS_VIEWGROUP"),
    "GROUPS_LEAVE_GROUP": ("leave_group", "GLOBAL_PLUGIN_GROUPS_LEAVEGROUP"),
    "FILES_CREATE_FOLDER": ("create_folder", "GLOBAL_PLUGIN_FILES_CREATEFOLDER"),
    "FILES_UPLOAD_FILE": ("upload_file", "GLOBAL_PLUGIN_FILES_UPLOADFILE"),
    "FILES_VIEW_FOLDER": ("view_folder", "GLOBAL_PLUGIN_FILES_VIEWFOLDER"),
    "FILES_DELETE_FILE": ("delete_file", "GLOBAL_PLUGIN_FILES_DELETEFILE"),
    "FILES_DELETE_FOLDER": ("delete_folder", "GLOBAL_PLUGIN_FILES_DELETEFOLDER"),
    "FORUM_CREATE_THREAD": ("create_thread", "GLOBAL_PLUGIN_FORUM_CREATETHREAD"),
    "FORUM_COMMENT_THREAD": ("comment_thread", "GLOBAL_PLUGIN_FORUM_COMMENTTHREAD"),
    "FORUM_VIEW_THREAD": ("view_thread", "GLOBAL_PLUGIN_FORUM_VIEWTHREAD"),
    "FORUM_VIEW_FORUM": ("view_forum", "GLOBAL_PLUGIN_FORUM_VIEWFORUM"),
    "PHOTOS_CREATE_ALBUM": ("create_album", "GLOBAL_PLUGIN_PHOTOS_CREATEDALBUM"),
    "PHOTOS_UPLOAD_PHOTO": ("upload_photo", "GLOBAL_PLUGIN_PHOTOS_UPLOADPHOTO"),
    "PHOTOS_VIEW_OWN_ALBUM": ("view_own_album", "GLOBAL_PLUGIN_PHOTOS_VIEWOWNALBUM"),
    "PHOTOS_VIEW_FRIEND_ALBUM": ("view_friend_album", "GLOBAL_PLUGIN_PHOTOS_VIEWFRIENDALBUM"),
    "PHOTOS_VIEW_FRIEND_PHOTO": ("view_friend_photo", "GLOBAL_PLUGIN_PHOTOS_VIEWFRIENDPHOTO"),
    "PHOTOS_DELETE_PHOTO": ("delete_photo", "GLOBAL_PLUGIN_PHOTOS_DELETEPHOTO"),
    "PHOTOS_DELETE_ALBUM": ("delete_album", "GLOBAL_PLUGIN_PHOTOS_DELETEALBUM"),
    "VOTING_CREATE_VOTE": ("create_vote", "GLOBAL_PLUGIN_VOTING_CREATEVOTE"),
    "VOTING_ADD_PUBLIC_VOTE": ("create_public_vote", "GLOBAL_PLUGIN_VOTING_ADDPUBLICVOTE"),
    "VOTING_INVITE_USER": ("invite_voter", "GLOBAL_PLUGIN_VOTING_INVITEUSER"),
    "VOTING_VOTE": ("vote", "GLOBAL_PLUGIN_VOTING_VOTE"),
    "VOTING_GET_MY_VOTINGS": ("my_votings", "GLOBAL_PLUGIN_VOTING_GETMYVOTINGS"),
    "VOTING_GET_RESULTS": ("voting_results", "GLOBAL_PLUGIN_VOTING_GETRESULTS"),
    "WALL_POST": ("wall_post", "GLOBAL_PLUGIN_WALL_POST"),
    "WALL_COMMENT": ("wall_comment", "GLOBAL_PLUGIN_WALL_COMMENT"),
    "WALL_VIEW_OWN": ("view_own_wall", "GLOBAL_PLUGIN_WALL_VIEWOWN"),
    "WALL_VIEW_FRIEND": ("view_friend_wall", "GLOBAL_PLUGIN_WALL_VIEWFRIEND"),
}

SUCCESS = "GLOBAL_PLUGIN_ACTIONS_SUCCEEDED"
FAILED = "GLOBAL_PLUGIN_ACTIONS_FAILED"

OWN_LISTS = ("Friends", "Outbox", "Messages", "Albums", "Folders", "Votings", "Groups")


class User:
    """Social client of one peer."""

    def __init__(self, peer, username: str):
        self.peer = peer
        self.node = peer.node
        self.sim = peer.sim
        self.cfg = peer.cfg
        self.store = peer.storage
        self.hub = peer.hub
        self.provider = peer.provider
        self.kp = peer.kp
        self.rng = peer.rng
        self.username = username
        self.user_id = make_user_id(username)
        self.keyring = Keyring()
        self.keyring.add(self.user_id, self.kp)
        self.pubs: dict[int, int] = {self.user_id: self.kp.public_key}
        self.dds = Dds(self.store, self.kp, self.provider, s=self.cfg.s, rng=self.rng,
                       sleep=self.sim.sleep)
        self.fgid = friends_group_id(self.user_id)
        self.friends: dict[int, int] = {}  # user id -> public key
        self.pending: set[int] = set()  # requests sent, not yet answered
        self.blocked: set[int] = set()
        self.groups: dict[int, Group] = {}  # groups this user administers
        self.joined: dict[int, int] = {}  # gid -> admin uid, for groups joined by invitation
        self.voter_groups: set[int] = set()
        self.chats: dict[str, bytes] = {}
        self.chat_seen = 0
        self.counter = 0
        self.collections = {"Albums": {}, "Folders": {}}  # name -> {index: object id}
        self.threads: list[str] = []
        self.votings: dict[int, dict] = {}  # vid -> info, own and invited
        self.voted: dict[int, int] = {}  # vid -> ballot index
        self.hidden_votings: set[int] = set()
        self.inbox_seen = 0
        self.registered = False
        self._lock = None
        self.results: Counter = Counter()
        self.failures: list[tuple[str, str]] = []
        self.hub.open("messaging", self._on_message)
        self.hub.open("livechat", self._on_chat_invite)

    # ------------------------------------------------------------------
    # helpers
    def name(self, what: str, uid: int | None = None) -> str:
        return struct_name(self.user_id if uid is None else uid, what)

    def _next(self) -> int:
        self.counter += 1
        return self.counter

    def _new_id(self, tag: str) -> int:
        return ids.hash160(f"{tag}:{self.user_id:x}:{self._next()}")

    def seal(self, payload: bytes, readers) -> bytes:
        return seal(payload, readers, self.kp, self.user_id, self.provider, self.pubs.get).encode()

    def open(self, data: bytes):
        """Generator: decrypt an encoded item, fetching group keys as needed."""
        item = SecureStorageItem.decode(data)
        steps = open_steps(item, self.keyring, self.provider)
        try:
            req = next(steps)
            while True:
                gitem = yield from self._group_key_item(req)
                req = steps.send(gitem)
        except StopIteration as stop:
            return stop.value

    def _group_key_item(self, gid: int):
        obj = yield from self.store.get(group_key_location(gid))
        if obj is None or obj.kind != "item":
            return None
        try:
            return SecureStorageItem.decode(obj.payload)
        except IntegrityError:
            return None

    def resolve(self, uid: int):
        """Generator: public key of a user or group principal."""
        pub = self.pubs.get(uid)
        if pub is not None:
            return pub
        try:
            pub = yield from resolve_user(self.store, uid, self.provider)
        except NotFound:
            rec = yield from self.store.get(group_record_id(uid))
            if rec is None:
                raise
            fields = decode_list((yield from self.open(rec.payload)))
            pub = ids.from_bytes(fields[2])
        self.pubs[uid] = pub
        return pub

    def put_item(self, fid: int, payload: bytes, readers):
        obj = make_object(self.kp, self.provider, fid, "item", self.seal(payload, readers))
        yield from self.store.insert(obj)
        return obj

    def update_item(self, fid: int, payload: bytes, readers):
        old = yield from self.store.require(fid, fresh=True)
        obj = successor(old, self.kp, self.provider, self.seal(payload, readers))
        yield from self.store.put(obj)
        return obj

    def read_item(self, fid: int, fresh: bool = False):
        obj = yield from self.store.require(fid, fresh)
        return (yield from self.open(obj.payload))

    def entries(self, name: str, fresh: bool = False):
        """Generator: ``[(index, payload, author_pub)]`` for readable entries."""
        out = []
        for idx, e in (yield from self.dds.entries(name, fresh)):
            try:
                payload = yield from self.open(e)
            except (AccessDenied, IntegrityError):
                continue
            if payload is not None:
                out.append((idx, payload, SecureStorageItem.decode(e).owner_pub))
        return out

    def _friend_readers(self, owner_uid: int | None = None):
        owner_uid = self.user_id if owner_uid is None else owner_uid
        readers = {self.user_id, owner_uid, friends_group_id(owner_uid)}
        return sorted(readers)

    def _ensure(self, principals):
        for p in principals:
            if p != PUBLIC:
                yield from self.resolve(p)

    def _pick_friend(self):
        if not self.friends:
            raise Skip("no friends")
        return self.rng.choice(sorted(self.friends))

    # ------------------------------------------------------------------
    # registration and friends
    def register(self, profile: dict | None = None, searchable=(), private=()):
        """Generator: publish the identity mapping, profile and empty lists.

        The profile lives at the node id: fields named in ``private`` are
        readable by friends only, the rest by everyone.  Fields named in
        ``searchable`` are also indexed for range search.
        """
        yield from publish_mapping(self.store, self.user_id, self.kp, self.provider)
        # the friends group: key item sealed to the friends, record is public
        g = create_group(self.fgid, self.user_id, self.provider)
        self.groups[self.fgid] = g
        self.keyring.add(self.fgid, g.keypair, group=True)
        self.pubs[self.fgid] = g.public_key
        yield from self._store_group(g, b"friends", new=True)
        for what in OWN_LISTS:
            yield from self.dds.create(self.name(what), kind="set" if what == "Friends" else "list")
        yield from self.dds.create(self.name("Inbox"), policy="append", appenders=ANY)
        for what in ("Wall", "Forum"):
            yield from self.dds.create(self.name(what), policy="append", appenders=[self.kp.public_key])
        profile = dict(profile or {"name": self.username})
        public = {k: v for k, v in profile.items() if k not in private}
        hidden = {k: v for k, v in profile.items() if k in private}
        yield from self.put_item(self.kp.public_key, _encode_fields(public), [PUBLIC])
        yield from self.put_item(private_profile_id(self.kp.public_key), _encode_fields(hidden),
                                 self._friend_readers())
        for field in searchable:
            if field in profile:
                yield from self.index_field(field, profile[field])
        self.registered = True

    def _store_group(self, g: Group, label: bytes, new: bool = False):
        item = seal_group_key(g, self.kp, self.provider, self.pubs.get).encode()
        rec = self.seal(encode_list([label, ids.to_bytes(g.admin), ids.to_bytes(g.public_key)]), [PUBLIC])
        if new:
            yield from self.store.put(make_object(self.kp, self.provider, group_key_location(g.group_id),
                                                  "item", item))
            yield from self.store.put(make_object(self.kp, self.provider, group_record_id(g.group_id),
                                                  "item", rec))
            return
        old = yield from self.store.require(group_key_location(g.group_id), fresh=True)
        yield from self.store.put(successor(old, self.kp, self.provider, item))
        old = yield from self.store.require(group_record_id(g.group_id), fresh=True)
        yield from self.store.put(successor(old, self.kp, self.provider, rec))

    def profile(self, uid: int):
        """Generator: the profile fields of ``uid`` this user may read."""
        node_id = yield from self.resolve(uid)
        out = _decode_fields((yield from self.read_item(node_id)))
        try:
            out.update(_decode_fields((yield from self.read_item(private_profile_id(node_id)))))
        except AccessDenied:
            pass
        return out

    def index_field(self, field: str, value):
        pht = Pht(self.store, self.kp, self.provider, f"search:{field}", D=self.cfg.search_bits,
                  M=self.cfg.M, policy="open")
        yield from pht.insert(field_key(value, self.user_id, self.cfg.search_bits),
                              self.seal(ids.to_bytes(self.user_id), [PUBLIC]))

    def search_users(self, ranges: dict):
        """Generator: user ids whose indexed fields fall in every given range."""
        result = None
        for field in sorted(ranges):
            lo, hi = ranges[field]
            pht = Pht(self.store, self.kp, self.provider, f"search:{field}", D=self.cfg.search_bits,
                      M=self.cfg.M, policy="open")
            a, b = field_range(lo, hi, self.cfg.search_bits)
            found = set()
            for key, value in (yield from pht.range(a, b)):
                try:
                    uid = ids.from_bytes((yield from self.open(value)))
                except (AccessDenied, IntegrityError):
                    continue
                if (key & 0xFFFFFF) == (uid & 0xFFFFFF):
                    found.add(uid)
            result = found if result is None else result & found
        return sorted(result or ())

    def notify(self, uid: int, kind: bytes, *fields: bytes):
        """Generator: drop a notification into another user's inbox."""
        yield from self.resolve(uid)
        entry = self.seal(encode_list([kind, ids.to_bytes(self.user_id), *fields]), [uid])
        yield from self.dds.append(self.name("Inbox", uid), entry)

    def friend_request(self, uid: int):
        if uid == self.user_id or uid in self.friends:
            return False
        self.pending.add(uid)
        self.node.metrics.count(ACTIONS["FRIENDS_REQUEST"][1])
        yield from self.notify(uid, b"freq")
        return True

    def friend_request_random(self):
        raise Skip("friend requests are issued by the setup phase")

    def block(self, uid: int):
        self.blocked.add(uid)

    def add_friend(self, uid: int):
        """Generator: record ``uid`` as a friend (idempotent)."""
        if uid in self.friends:
            return False
        pub = yield from self.resolve(uid)
        self.friends[uid] = pub
        members = yield from self._set_members(self.name("Friends"))
        if uid not in members:
            yield from self.dds.append(self.name("Friends"), self.seal(ids.to_bytes(uid), [self.user_id]))
        g = self.groups[self.fgid]
        if uid not in g.members:
            add_member(g, uid, lambda p: ())
            yield from self._store_group(g, b"friends")
        appenders = sorted({self.kp.public_key, *self.friends.values()})
        for what in ("Wall", "Forum"):
            yield from self.dds.set_access(self.name(what), "append", appenders)
        return True

    def _set_members(self, name: str):
        out = {}
        for idx, payload, _ in (yield from self.entries(name, fresh=True)):
            out.setdefault(ids.from_bytes(payload), idx)
        return out

    def friend_list(self):
        members = yield from self._set_members(self.name("Friends"))
        return sorted(members)

    def poll_inbox(self):
        """Generator: drain the inbox and handle every notification."""
        handled = Counter()
        raw = yield from self.dds.drain(self.name("Inbox"))
        archive = []
        for e in raw:
            try:
                payload = yield from self.open(e)
                fields = decode_list(payload)
            except (AccessDenied, IntegrityError):
                continue
            author = SecureStorageItem.decode(e).owner_pub
            kind, sender = fields[0], ids.from_bytes(fields[1])
            try:
                if (yield from self.resolve(sender)) != author:
                    continue  # signed by someone other than the claimed sender
            except NotFound:
                continue
            handled[kind] += 1
            if kind == b"freq":
                if sender in self.blocked:
                    continue
                yield from self.add_friend(sender)
                yield from self.notify(sender, b"facc")
            elif kind == b"facc":
                if sender in self.pending:
                    self.pending.discard(sender)
                    yield from self.add_friend(sender)
            elif kind == b"msg":
                archive.append(self.seal(payload, [self.user_id]))  # re-signed: list entries carry their writer
            elif kind == b"ginv":
                gid = ids.from_bytes(fields[2])
                self.joined[gid] = sender
            elif kind == b"gleave":
                yield from self._member_left(ids.from_bytes(fields[2]), sender)
            elif kind == b"vinv":
                vid = ids.from_bytes(fields[2])
                self.votings.setdefault(vid, {"creator": sender, "public": False})
            elif kind == b"cinv":
                self._join_chat(fields[2].decode(), fields[3])
        for e in archive:
            yield from self.dds.append(self.name("Messages"), e)
        self.inbox_seen += len(archive)
        return handled

    # ------------------------------------------------------------------
    # messaging
    def _on_message(self, sender_pub: int, payload: bytes):
        self.node.metrics.count("GLOBAL_PLUGIN_MESSAGING_PUSHED")

    def send_message(self, uid: int | None = None, text: bytes | None = None):
        uid = self._pick_friend() if uid is None else uid
        text = text or f"hello #{self._next()} from {self.username}".encode()
        body = encode_list([b"msg", ids.to_bytes(self.user_id), text])
        yield from self.notify(uid, b"msg", text)
        yield from self.dds.append(self.name("Outbox"), self.seal(body, [self.user_id]))
        yield from self.hub.send("messaging", [self.pubs[uid]], body)

    def view_inbox(self):
        yield from self.poll_inbox()
        out = []
        for _, payload, _ in (yield from self.entries(self.name("Messages"))):
            out.append(decode_list(payload)[2])
        return out

    def view_outbox(self):
        return [decode_list(p)[2] for _, p, _ in (yield from self.entries(self.name("Outbox")))]

    # ------------------------------------------------------------------
    # live chat over topic channels
    def _join_chat(self, topic: str, key: bytes):
        if topic in self.chats:
            return
        self.chats[topic] = key
        self.node.spawn(self.hub.subscribe(topic, lambda data, t=topic: self._on_chat(t, data)))

    def _on_chat(self, topic: str, data: bytes):
        key = self.chats.get(topic)
        if key is not None:
            try:
                self.provider.sym_decrypt(key, data)
                self.chat_seen += 1
            except Exception:  # noqa: BLE001 - undecryptable chat traffic is ignored
                pass

    def _on_chat_invite(self, sender_pub: int, payload: bytes):
        fields = decode_list(payload)
        if fields[0] == b"cinv":
            self._join_chat(fields[1].decode(), fields[2])

    def chat_invite(self, count: int = 2):
        friends = sorted(self.friends)
        if not friends:
            raise Skip("no friends")
        topic = f"chat:{self.user_id:x}:{self._next()}"
        key = self.provider.new_sym_key()
        self.chats[topic] = key
        yield from self.hub.subscribe(topic, lambda data, t=topic: self._on_chat(t, data))
        invitees = self.rng.sample(friends, min(count, len(friends)))
        acked = yield from self.hub.send("livechat", [self.friends[u] for u in invitees],
                                         encode_list([b"cinv", topic.encode(), key]))
        for u in invitees:
            if self.friends[u] not in acked:  # offline: leave the invitation in the inbox
                yield from self.notify(u, b"cinv", topic.encode(), key)
        return topic

    def chat_message(self, text: bytes | None = None):
        if not self.chats:
            raise Skip("not in any chat")
        topic = self.rng.choice(sorted(self.chats))
        text = text or f"chat #{self._next()}".encode()
        yield from self.hub.publish(topic, self.provider.sym_encrypt(self.chats[topic], text))

    def chat_leave(self):
        if not self.chats:
            raise Skip("not in any chat")
        topic = self.rng.choice(sorted(self.chats))
        del self.chats[topic]
        self.hub.unsubscribe(topic)
        return topic
        yield  # pragma: no cover

    # ------------------------------------------------------------------
    # groups
    def create_group(self, label: str | None = None):
        gid = self._new_id("group")
        g = create_group(gid, self.user_id, self.provider)
        self.groups[gid] = g
        self.keyring.add(gid, g.keypair, group=True)
        self.pubs[gid] = g.public_key
        yield from self._store_group(g, (label or f"group {self.counter}").encode(), new=True)
        members = struct_name(gid, "Members")
        yield from self.dds.create(members)
        yield from self.dds.append(members, self.seal(ids.to_bytes(self.user_id), [gid]))
        yield from self.dds.append(self.name("Groups"), self.seal(ids.to_bytes(gid), [self.user_id]))
        return gid

    def _own_groups(self):
        return sorted(g for g in self.groups if g != self.fgid and g not in self.voter_groups)

    def invite_to_group(self, gid: int | None = None, uid: int | None = None):
        if gid is None:
            options = [(g, u) for g in self._own_groups() for u in sorted(self.friends)
                       if u not in self.groups[g].members]
            if not options:
                raise Skip("no group with an uninvited friend")
            gid, uid = self.rng.choice(options)
        g = self.groups[gid]

        def members_of(p):
            return self.groups[p].members if p in self.groups else ()
        yield from self.resolve(uid)
        add_member(g, uid, members_of)
        yield from self._store_group(g, b"group")
        yield from self.dds.append(struct_name(gid, "Members"), self.seal(ids.to_bytes(uid), [gid]))
        yield from self.notify(uid, b"ginv", ids.to_bytes(gid))

    def view_group(self, gid: int | None = None):
        if gid is None:
            options = self._own_groups() + sorted(self.joined)
            if not options:
                raise Skip("not in any group")
            gid = self.rng.choice(options)
        rec = yield from self.read_item(group_record_id(gid))
        members = []
        for _, payload, _ in (yield from self.entries(struct_name(gid, "Members"))):
            members.append(ids.from_bytes(payload))
        if not members:
            raise AccessDenied("cannot read the member list")
        return decode_list(rec)[0], members

    def leave_group(self, gid: int | None = None):
        """Leave a joined group; an admin with none leaves (dissolves) an own group."""
        if gid is None:
            if self.joined:
                gid = self.rng.choice(sorted(self.joined))
            elif self._own_groups():
                gid = self.rng.choice(self._own_groups())
            else:
                raise Skip("not in any group")
        if gid in self.groups:
            yield from self.dissolve_group(gid)
            return
        admin = self.joined.pop(gid)
        yield from self.notify(admin, b"gleave", ids.to_bytes(gid))

    def dissolve_group(self, gid: int):
        """Admin only: delete the group's record, key item and member list."""
        self.groups.pop(gid)
        yield from self.dds.destroy(struct_name(gid, "Members"))
        yield from self.store.delete(group_record_id(gid))
        yield from self.store.delete(group_key_location(gid))
        for idx, payload, _ in (yield from self.entries(self.name("Groups"), fresh=True)):
            if ids.from_bytes(payload) == gid:
                yield from self.dds.remove(self.name("Groups"), idx)

    def _member_left(self, gid: int, uid: int):
        g = self.groups.get(gid)
        if g is None or uid not in g.members:
            return
        remove_member(g, uid, self.provider)
        self.keyring.add(gid, g.keypair, group=True)
        self.pubs[gid] = g.public_key
        yield from self._store_group(g, b"group")
        name = struct_name(gid, "Members")
        for idx, payload, _ in (yield from self.entries(name, fresh=True)):
            if ids.from_bytes(payload) == uid:
                yield from self.dds.remove(name, idx)

    # ------------------------------------------------------------------
    # chunked collections: photo albums and file folders
    def _create_collection(self, kind: str):
        cname = self.name(f"{kind[:-1]}{self._next()}")
        yield from self.dds.create(cname)
        idx = yield from self.dds.append(self.name(kind), self.seal(cname.encode(), self._friend_readers()))
        self.collections[kind][cname] = {"index": idx, "items": {}}
        return cname

    def upload(self, kind: str, cname: str | None = None, data: bytes | None = None):
        """Generator: chunk ``data`` into items, store a manifest, list it."""
        cols = self.collections[kind]
        if cname is None:
            if not cols:
                raise Skip(f"no {kind.lower()}")
            cname = self.rng.choice(sorted(cols))
        if data is None:
            size = self.cfg.photo_bytes if kind == "Albums" else self.cfg.file_bytes
            data = self.rng.randbytes(size)
        readers = self._friend_readers()
        mid = self._new_id("manifest")
        chunk_ids = []
        step = self.cfg.chunk_size
        for i in range(0, max(len(data), 1), step):
            cid = ids.hash160(ids.to_bytes(mid) + _u32(i // step))
            yield from self.put_item(cid, data[i:i + step], readers)
            chunk_ids.append(cid)
        manifest = encode_list([_u32(len(data)), ids.to_bytes(ids.hash160(data)),
                                *(ids.to_bytes(c) for c in chunk_ids)])
        yield from self.put_item(mid, manifest, readers)
        idx = yield from self.dds.append(cname, self.seal(ids.to_bytes(mid), readers))
        cols[cname]["items"][idx] = mid
        return cname, mid

    def download(self, mid: int):
        """Generator: fetch a manifest and its chunks; verifies the content hash."""
        fields = decode_list((yield from self.read_item(mid)))
        size, digest = struct.unpack(">I", fields[0])[0], ids.from_bytes(fields[1])
        parts = []
        for c in fields[2:]:
            parts.append((yield from self.read_item(ids.from_bytes(c))))
        data = b"".join(parts)
        if len(data) != size or ids.hash160(data) != digest:
            raise IntegrityError("reassembled content does not match its manifest")
        return data

    def _delete_entry(self, mid: int):
        fields = decode_list((yield from self.read_item(mid, fresh=True)))
        for c in fields[2:]:
            yield from self.store.delete(ids.from_bytes(c))
        yield from self.store.delete(mid)

    def delete_item(self, kind: str, cname: str | None = None, idx: int | None = None):
        cols = self.collections[kind]
        if cname is None:
            options = sorted(c for c in cols if cols[c]["items"])
            if not options:
                raise Skip(f"nothing to delete in {kind.lower()}")
            cname = self.rng.choice(options)
            idx = self.rng.choice(sorted(cols[cname]["items"]))
        mid = cols[cname]["items"].pop(idx)
        yield from self._delete_entry(mid)
        yield from self.dds.remove(cname, idx)

    def delete_collection(self, kind: str, cname: str | None = None):
        cols = self.collections[kind]
        if cname is None:
            if not cols:
                raise Skip(f"no {kind.lower()}")
            cname = self.rng.choice(sorted(cols))
        info = cols.pop(cname)
        for idx in sorted(info["items"]):
            yield from self._delete_entry(info["items"][idx])
        yield from self.dds.destroy(cname)
        yield from self.dds.remove(self.name(kind), info["index"])

    def view_collection(self, cname: str):
        out = []
        for _, payload, _ in (yield from self.entries(cname)):
            out.append(ids.from_bytes(payload))
        return out

    def list_collections(self, kind: str, uid: int):
        return [p.decode() for _, p, _ in (yield from self.entries(self.name(kind, uid)))]

    def create_album(self):
        return (yield from self._create_collection("Albums"))

    def upload_photo(self):
        return (yield from self.upload("Albums"))

    def view_own_album(self):
        cols = self.collections["Albums"]
        if not cols:
            raise Skip("no album")
        return (yield from self.view_collection(self.rng.choice(sorted(cols))))

    def _friend_collection(self, kind: str, need_items: bool):
        friends = sorted(self.friends)
        self.rng.shuffle(friends)
        for uid in friends:
            names = yield from self.list_collections(kind, uid)
            self.rng.shuffle(names)
            for cname in names:
                if not need_items:
                    return cname, None
                items = yield from self.view_collection(cname)
                if items:
                    return cname, self.rng.choice(items)
        raise Skip(f"no friend has a non-empty {kind[:-1].lower()}")

    def view_friend_album(self):
        cname, _ = yield from self._friend_collection("Albums", False)
        return (yield from self.view_collection(cname))

    def view_friend_photo(self):
        _, mid = yield from self._friend_collection("Albums", True)
        return (yield from self.download(mid))

    def delete_photo(self):
        yield from self.delete_item("Albums")

    def delete_album(self):
        yield from self.delete_collection("Albums")

    def create_folder(self):
        return (yield from self._create_collection("Folders"))

    def upload_file(self):
        return (yield from self.upload("Folders"))

    def view_folder(self):
        cols = self.collections["Folders"]
        if not cols:
            raise Skip("no folder")
        return (yield from self.view_collection(self.rng.choice(sorted(cols))))

    def delete_file(self):
        yield from self.delete_item("Folders")

    def delete_folder(self):
        yield from self.delete_collection("Folders")

    # ------------------------------------------------------------------
    # forum
    def create_thread(self, title: bytes | None = None):
        tname = self.name(f"Thread{self._next()}")
        appenders = sorted({self.kp.public_key, *self.friends.values()})
        yield from self.dds.create(tname, policy="append", appenders=appenders)
        readers = self._friend_readers()
        yield from self.dds.append(tname, self.seal(title or f"thread by {self.username}".encode(), readers))
        yield from self.dds.append(self.name("Forum"), self.seal(tname.encode(), readers))
        self.threads.append(tname)
        return tname

    def _any_thread(self):
        owner = self.rng.choice(sorted({self.user_id, *self.friends}))
        names = [p.decode() for _, p, _ in (yield from self.entries(self.name("Forum", owner)))]
        if not names:
            if not self.threads:
                raise Skip("no forum thread")
            return self.user_id, self.rng.choice(self.threads)
        return owner, self.rng.choice(sorted(names))

    def comment_thread(self, text: bytes | None = None):
        owner, tname = yield from self._any_thread()
        yield from self._ensure([friends_group_id(owner), owner])
        entry = self.seal(text or f"reply by {self.username}".encode(), self._friend_readers(owner))
        yield from self.dds.append(tname, entry)

    def view_thread(self):
        _, tname = yield from self._any_thread()
        return [p for _, p, _ in (yield from self.entries(tname))]

    def view_forum(self):
        owner = self.rng.choice(sorted({self.user_id, *self.friends}))
        return [p.decode() for _, p, _ in (yield from self.entries(self.name("Forum", owner)))]

    # ------------------------------------------------------------------
    # wall: the list holds pointers, bodies are items owned by their authors
    def wall_post(self, owner: int | None = None, text: bytes | None = None, parent: int = 0):
        owner = self.rng.choice(sorted({self.user_id, *self.friends})) if owner is None else owner
        readers = self._friend_readers(owner)
        yield from self._ensure(readers)
        eid = self._new_id("wall")
        body = encode_list([b"comment" if parent else b"post", ids.to_bytes(parent),
                            text or f"post by {self.username}".encode()])
        yield from self.put_item(eid, body, readers)
        idx = yield from self.dds.append(self.name("Wall", owner), self.seal(ids.to_bytes(eid), readers))
        return owner, idx, eid

    def wall_entries(self, owner: int, limit: int | None = None, fresh: bool = False):
        """Generator: ``[(index, entry id, author pub, kind, parent, text)]``; bodies fetched."""
        ptrs = yield from self.entries(self.name("Wall", owner), fresh)
        if limit is not None:
            ptrs = ptrs[-limit:]
        out = []
        for idx, payload, author in ptrs:
            eid = ids.from_bytes(payload)
            obj = yield from self.store.get(eid)
            if obj is None:
                continue
            if SecureStorageItem.decode(obj.payload).owner_pub != author:
                continue  # pointer and body disagree on the author
            body = yield from self.open(obj.payload)
            if body is None:
                out.append((idx, eid, author, b"deleted", 0, b""))
                continue
            kind, parent, text = decode_list(body)
            out.append((idx, eid, author, kind, ids.from_bytes(parent), text))
        return out

    def wall_comment(self, owner: int | None = None, text: bytes | None = None):
        if owner is None:
            owners = sorted(self.friends)
            self.rng.shuffle(owners)
            owners.append(self.user_id)  # own wall as the fallback
        else:
            owners = [owner]
        posts = []
        for owner in owners:
            posts = [e for e in (yield from self.wall_entries(owner, limit=8)) if e[3] == b"post"]
            if posts:
                break
        if not posts:
            raise Skip("no post to comment on")
        target = self.rng.choice(posts)
        return (yield from self.wall_post(owner, text or f"comment by {self.username}".encode(), target[1]))

    def edit_wall_entry(self, owner: int, eid: int, text: bytes, parent: int = 0):
        """Author-only: replace the body under the same entry id."""
        body = encode_list([b"comment" if parent else b"post", ids.to_bytes(parent), text])
        yield from self.update_item(eid, body, self._friend_readers(owner))

    def tombstone_wall_entry(self, eid: int):

        old = yield from self.store.require(eid, fresh=True)
        item = tombstone(SecureStorageItem.decode(old.payload), self.kp, self.provider)
        yield from self.store.put(successor(old, self.kp, self.provider, item.encode()))

    def remove_wall_pointer(self, idx: int):
        """Wall owner only: drop an entry from the wall (its body stays)."""
        yield from self.dds.remove(self.name("Wall"), idx)

    def view_own_wall(self):
        return (yield from self.wall_entries(self.user_id, limit=8))

    def view_friend_wall(self):
        return (yield from self.wall_entries(self._pick_friend(), limit=8))

    # ------------------------------------------------------------------
    # voting
    def create_vote(self, public: bool = False, choices=(b"yes", b"no"), question: bytes | None = None):
        vid = self._new_id("vote")
        question = question or f"question {self.counter} by {self.username}".encode()
        ballots = struct_name(vid, "Ballots")
        if public:
            readers, appenders, vgid = [PUBLIC], ANY, 0
        else:
            vgid = ids.hash160(b"voters" + ids.to_bytes(vid))
            g = create_group(vgid, self.user_id, self.provider)
            self.groups[vgid] = g
            self.voter_groups.add(vgid)
            self.keyring.add(vgid, g.keypair, group=True)
            self.pubs[vgid] = g.public_key
            yield from self._store_group(g, b"voters", new=True)
            readers, appenders = [vgid], [self.kp.public_key]
        record = encode_list([b"1" if public else b"0", ids.to_bytes(self.user_id), ids.to_bytes(vgid),
                              question, *choices])
        yield from self.put_item(vid, record, readers)
        yield from self.dds.create(ballots, policy="append", appenders=appenders)
        yield from self.dds.append(self.name("Votings"), self.seal(ids.to_bytes(vid), self._friend_readers()))
        self.votings[vid] = {"creator": self.user_id, "public": public, "voters": vgid}
        return vid

    def create_public_vote(self):
        return (yield from self.create_vote(public=True))

    def invite_voter(self, vid: int | None = None, uid: int | None = None):
        if vid is None:
            options = [(v, u) for v, info in sorted(self.votings.items())
                       if info["creator"] == self.user_id and not info["public"]
                       for u in sorted(self.friends) if u not in self.groups[info["voters"]].members]
            if not options:
                raise Skip("no private voting with an uninvited friend")
            vid, uid = self.rng.choice(options)
        info = self.votings[vid]
        g = self.groups[info["voters"]]
        pub = yield from self.resolve(uid)
        add_member(g, uid, lambda p: ())
        yield from self._store_group(g, b"voters")
        h = yield from self.dds.handle(struct_name(vid, "Ballots"), fresh=True)
        yield from self.dds.set_access(h.name, "append", sorted(set(h.appenders) | {pub}))
        yield from self.notify(uid, b"vinv", ids.to_bytes(vid))

    def _voting(self, vid: int):
        fields = decode_list((yield from self.read_item(vid)))
        return {"public": fields[0] == b"1", "creator": ids.from_bytes(fields[1]),
                "voters": ids.from_bytes(fields[2]), "question": fields[3], "choices": fields[4:]}

    def _discover_public_votes(self):
        for uid in sorted(self.friends):
            for _, payload, _ in (yield from self.entries(self.name("Votings", uid))):
                vid = ids.from_bytes(payload)
                if vid not in self.votings and vid not in self.hidden_votings:
                    try:
                        info = yield from self._voting(vid)
                    except AccessDenied:  # a private voting we were not invited to
                        self.hidden_votings.add(vid)
                        continue
                    if info["public"]:
                        self.votings[vid] = info

    def vote(self, vid: int | None = None, choice: int | None = None):
        """Cast (or re-cast) a ballot.

        The ballot is an item at ``ballot_id(vid, user)`` owned by the voter;
        the ballots list only points at it, once per voter.  Re-casting
        updates the item, which only its author can do.
        """
        if vid is None:
            if not any(v not in self.voted for v in self.votings):
                yield from self._discover_public_votes()
            options = sorted(self.votings)
            if not options:
                raise Skip("no voting available")
            fresh = [v for v in options if v not in self.voted]
            vid = self.rng.choice(fresh or options)
        info = yield from self._voting(vid)
        choice = self.rng.randrange(len(info["choices"])) if choice is None else choice
        readers = [PUBLIC] if info["public"] else [info["voters"]]
        yield from self._ensure(readers)
        bid = ballot_id(vid, self.user_id)
        body = encode_list([ids.to_bytes(vid), ids.to_bytes(self.user_id), _u32(choice)])
        if vid in self.voted:
            yield from self.update_item(bid, body, readers)
        else:
            existing = yield from self.store.get(bid, fresh=True)
            if existing is None:
                yield from self.put_item(bid, body, readers)
            else:
                yield from self.update_item(bid, body, readers)
            self.voted[vid] = yield from self.dds.append(struct_name(vid, "Ballots"),
                                                         self.seal(ids.to_bytes(bid), readers))
        self.votings.setdefault(vid, info)
        return vid, choice

    def my_votings(self):
        return [ids.from_bytes(p) for _, p, _ in (yield from self.entries(self.name("Votings")))]

    def tally(self, vid: int):
        """Generator: counts per choice over distinct, correctly authored ballots."""
        info = yield from self._voting(vid)
        counted = {}
        for _, payload, _ in (yield from self.entries(struct_name(vid, "Ballots"), fresh=True)):
            bid = ids.from_bytes(payload)
            if bid in counted:
                continue
            obj = yield from self.store.get(bid, fresh=True)
            if obj is None:
                continue
            try:
                f = decode_list((yield from self.open(obj.payload)))
                voter = ids.from_bytes(f[1])
                if ids.from_bytes(f[0]) != vid or ballot_id(vid, voter) != bid:
                    continue
                if (yield from self.resolve(voter)) != SecureStorageItem.decode(obj.payload).owner_pub:
                    continue  # slot taken by someone other than the voter
            except (AccessDenied, IntegrityError, NotFound):
                continue
            counted[bid] = struct.unpack(">I", f[2])[0]
        tally = Counter(counted.values())
        return [tally.get(i, 0) for i in range(len(info["choices"]))]

    def voting_results(self, vid: int | None = None):
        if vid is None:
            if not self.voted:
                raise Skip("results are shown only after voting")
            vid = self.rng.choice(sorted(self.voted))
        elif vid not in self.voted:
            raise Skip("results are shown only after voting")
        return (yield from self.tally(vid))

    # ------------------------------------------------------------------
    # dispatch
    def perform(self, action: str):
        """Generator: run a named workload action, one at a time per user.

        Returns ``"ok"``, ``"skipped"`` or ``"failed"``.
        """
        method, metric = ACTIONS[action]
        while self._lock is not None:
            yield self._lock

        self._lock = lock = Future()
        try:
            yield from getattr(self, method)()
            self.node.metrics.count(metric)
            self.node.metrics.count(SUCCESS)
            self.results["ok"] += 1
            return "ok"
        except Skip as exc:
            self.results["skipped"] += 1
            self.failures.append((action, f"skipped: {exc}"))
            return "skipped"
        except (StorageError, DdsError, AccessDenied, IntegrityError, UnknownPrincipal) as exc:
            self.node.metrics.count(FAILED)
            self.results["failed"] += 1
            self.failures.append((action, f"{type(exc).__name__}: {exc}"))
            return "failed"
        finally:
            self._lock = None
            lock.set_result(None)

    def background(self):
        """Generator: periodic inbox polling (notifications, requests, invites)."""
        period = int(self.cfg.notify_poll_s * 1000)
        yield self.sim.sleep(self.rng.randint(0, period))
        while True:
            while self._lock is not None:
                yield self._lock
    
            self._lock = lock = Future()
            try:
                yield from self.poll_inbox()
            except (StorageError, DdsError) as exc:
                self.failures.append(("POLL", f"{type(exc).__name__}: {exc}"))
            finally:
                self._lock = None
                lock.set_result(None)
            yield self.sim.sleep(period)
