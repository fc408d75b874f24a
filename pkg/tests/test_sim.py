import pytest

from p2posn.sim import Endpoint, Killed, Network, RpcTimeout, Simulator


def pair(seed=0):
    sim = Simulator(seed)
    net = Network(sim, (10, 10))
    a, b = Endpoint(sim, net, 1), Endpoint(sim, net, 2)
    a.go_online()
    b.go_online()
    return sim, a, b


def test_events_run_in_time_then_fifo_order():
    sim = Simulator()
    seen = []
    sim.schedule(5, seen.append, "late")
    sim.schedule(1, seen.append, "a")
    sim.schedule(1, seen.append, "b")
    sim.run()
    assert seen == ["a", "b", "late"] and sim.now == 5


def test_rpc_round_trip_and_generator_handlers():
    sim, a, b = pair()
    b.handlers["echo"] = lambda src, x: (src.node_id, x)

    def slow(src, x):
        yield sim.sleep(100)
        return x * 2
    b.handlers["slow"] = slow

    def client():
        r1 = yield a.rpc(b.desc, "echo", 7)
        r2 = yield a.rpc(b.desc, "slow", 21)
        return r1, r2
    assert sim.run_process(client()) == ((1, 7), 42)
    assert sim.now == 20 + 120


def test_rpc_times_out_when_peer_offline():
    sim, a, b = pair()
    b.go_offline()

    def client():
        yield a.rpc(b.desc, "echo", 1, timeout=300)
    with pytest.raises(RpcTimeout):
        sim.run_process(client())
    assert sim.now == 300


def test_crash_kills_owned_processes():
    sim, a, _ = pair()
    ticks = []

    def loop():
        while True:
            yield sim.sleep(10)
            ticks.append(sim.now)
    proc = a.spawn(loop())
    sim.run(until=35)
    a.go_offline()
    sim.run(until=100)
    assert ticks == [10, 20, 30]
    assert isinstance(proc.error, Killed)


def test_parallel_wait_collects_errors():
    sim, a, b = pair()
    b.handlers["ok"] = lambda src: "fine"

    def boom(src):
        raise ValueError("nope")
    b.handlers["bad"] = boom

    def client():
        return (yield [a.rpc(b.desc, "ok"), a.rpc(b.desc, "bad")])
    ok, bad = sim.run_process(client())
    assert ok == "fine" and isinstance(bad, ValueError)


def test_same_seed_same_trace():
    def trace(seed):
        sim = Simulator(seed)
        net = Network(sim, (10, 50))
        eps = [Endpoint(sim, net, i) for i in range(5)]
        for e in eps:
            e.go_online()
            e.handlers["ping"] = lambda src, i: i
        out = []
        for i, e in enumerate(eps):
            f = e.rpc(eps[(i + 1) % 5].desc, "ping", i)
            f.add_callback(lambda f, i=i: out.append((sim.now, i)))
        sim.run()
        return out
    assert trace(4) == trace(4)
    assert trace(4) != trace(5)
