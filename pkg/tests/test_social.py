import pytest

from conftest import build_peers
from p2posn.secure_items import AccessDenied
from p2posn.social import ACTIONS, field_key, field_range


@pytest.fixture(scope="module")
def net():
    return build_peers(8, seed=3)


def run(sim, gen):
    return sim.run_process(gen)


def test_friendship_is_mutual(net):
    sim, peers = net
    for i, p in enumerate(peers):
        nxt = peers[(i + 1) % len(peers)].user.user_id
        assert nxt in p.user.friends
        assert nxt in run(sim, p.user.friend_list())
    assert peers[0].user.user_id in peers[1].user.friends


def test_message_reaches_the_recipient_inbox(net):
    sim, peers = net
    a, b = peers[0].user, peers[1].user
    run(sim, a.send_message(b.user_id, b"ping 1"))
    assert b"ping 1" in run(sim, b.view_inbox())
    assert b"ping 1" in run(sim, a.view_outbox())


def join_extra(sim, peers, name, profile, **kw):
    from p2posn.config import Config
    from p2posn.peer import Peer
    p = Peer(sim, peers[0].node.net, Config(), peers[0].provider, name, "pw", 5)
    run(sim, p.join(peers[0].node.desc))
    run(sim, p.user.register(profile, **kw))
    return p


def test_private_profile_fields_for_friends_only():
    sim, peers = build_peers(5, seed=6, friends_ring=False)
    zoe = join_extra(sim, peers, "zoe", {"name": "zoe", "city": "oslo"}, private=("city",))
    friend, stranger = peers[1].user, peers[2].user
    run(sim, friend.friend_request(zoe.user.user_id))
    run(sim, zoe.user.poll_inbox())
    run(sim, friend.poll_inbox())
    assert run(sim, friend.profile(zoe.user.user_id)) == {"name": "zoe", "city": "oslo"}
    assert run(sim, stranger.profile(zoe.user.user_id)) == {"name": "zoe"}


def test_search_key_is_order_preserving():
    assert field_key(30, 5) < field_key(31, 0)
    assert field_key("anna", 9) < field_key("bert", 0)
    lo, hi = field_range(20, 29)
    assert lo <= field_key(25, 123456) <= hi
    assert not lo <= field_key(30, 1) <= hi


def test_range_search_finds_registered_users():
    sim, peers = build_peers(6, seed=5, friends_ring=False)
    u = peers[0].user
    extra = join_extra(sim, peers, "zoe", {"name": "zoe", "age": 33, "city": "oslo"}, searchable=("age", "city"))
    assert extra.user.user_id in run(sim, u.search_users({"age": (30, 40)}))
    assert extra.user.user_id not in run(sim, u.search_users({"age": (34, 90)}))
    assert extra.user.user_id in run(sim, u.search_users({"age": (30, 40), "city": ("oslo", "oslo")}))


def test_upload_download_round_trip(net):
    sim, peers = net
    u = peers[2].user
    run(sim, u.create_folder())
    cname = sorted(u.collections["Folders"])[0]
    data = bytes(range(256)) * 5
    mid = run(sim, u.upload("Folders", cname, data))
    mid = mid if isinstance(mid, int) else mid[-1]
    assert run(sim, peers[3].user.download(mid)) == data  # a friend
    with pytest.raises(AccessDenied):
        run(sim, peers[6].user.download(mid))  # not a friend


def test_private_vote_counts_each_voter_once(net):
    sim, peers = net
    owner, voter = peers[4].user, peers[5].user
    vid = run(sim, owner.create_vote())
    run(sim, owner.invite_voter(vid, voter.user_id))
    run(sim, voter.poll_inbox())
    run(sim, voter.vote(vid, 0))
    run(sim, voter.vote(vid, 1))  # re-cast replaces the ballot
    run(sim, owner.vote(vid, 1))
    assert run(sim, owner.tally(vid)) == [0, 2]


def test_every_workload_action_succeeds(net):
    sim, peers = net
    order = [a for a in ACTIONS if a != "FRIENDS_REQUEST"]
    outcomes = {a: [] for a in order}
    for _ in range(2):
        for a in order:
            for p in peers[:4]:
                outcomes[a].append(run(sim, p.user.perform(a)))
            for p in peers:
                run(sim, p.user.poll_inbox())
    for a, res in outcomes.items():
        assert "failed" not in res, (a, res)
        assert "ok" in res, (a, res)
