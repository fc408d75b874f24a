import pytest

from p2posn.config import Config
from p2posn.crypto import make_provider
from p2posn.peer import Peer
from p2posn.sim import Network, Simulator


def build_peers(n: int, seed: int = 1, cfg: Config | None = None, friends_ring: bool = True):
    """Join, register and (optionally) befriend ``n`` peers in a ring."""
    cfg = cfg or Config()
    sim = Simulator(seed)
    net = Network(sim)
    prov = make_provider("double", seed)
    peers = []
    for i in range(n):
        p = Peer(sim, net, cfg, prov, f"user{i}", "pw", seed)
        sim.run_process(p.join(peers[0].node.desc if peers else None))
        peers.append(p)
    sim.run(until=sim.now + 60_000)
    for p in peers:
        sim.run_process(p.user.register())
    if friends_ring:
        for i, p in enumerate(peers):
            sim.run_process(p.user.friend_request(peers[(i + 1) % n].user.user_id))
        for _ in range(2):
            for p in peers:
                sim.run_process(p.user.poll_inbox())
    return sim, peers


@pytest.fixture(scope="module")
def social_net():
    return build_peers(8)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
