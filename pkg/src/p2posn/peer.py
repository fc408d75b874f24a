"""A full simulated participant: overlay, storage, channels, monitoring and
the social client, wired together."""
from __future__ import annotations

import random

from .channels import ChannelHub
from .config import Config
from .crypto import CryptoProvider
from .monitoring import Monitor
from .overlay import OverlayNode
from .sim import Network, Simulator
from .storage import StorageService

DATA_READ_RATE = "GLOBAL_NETWORK_PASTRY_DATA_READ_RATE"
MESSAGES_RATE = "GLOBAL_NETWORK_MESSAGES_RECEIVED_RATE"
DISPATCH_RATE = "GLOBAL_MESSAGEDISPATCHER_MESSAGES_RECEIVED_RATE"
NODES = "GLOBAL_NETWORK_NODES"


class Peer:
    def __init__(self, sim: Simulator, net: Network, cfg: Config, provider: CryptoProvider,
                 username: str, passphrase: str, seed: int = 0, weak: bool = False):
        from .social import User

        self.sim = sim
        self.cfg = cfg
        self.provider = provider
        self.kp = provider.derive_identity(username, passphrase)
        self.node = OverlayNode(sim, net, self.kp.public_key, cfg, weak=weak)
        self.storage = StorageService(self.node, self.kp, provider)
        self.hub = ChannelHub(self.node, self.kp, provider)
        self.monitor = Monitor(self.node)
        self.rng = random.Random(f"{seed}:{username}")
        self.user = User(self, username)
        self._last = {"bytes": 0, "msgs": 0, "app": 0}
        period = self.monitor.period_s
        self.monitor.add_sensor(NODES, lambda: 1)
        self.monitor.add_sensor(DATA_READ_RATE, lambda: self._rate("bytes", self.node.rx_bytes, period))
        self.monitor.add_sensor(MESSAGES_RATE, lambda: self._rate("msgs", self.node.rx_msgs, period))
        self.monitor.add_sensor(DISPATCH_RATE, lambda: self._rate("app", self.node.app_rx, period))

    def _rate(self, key: str, value: int, period: float):
        from fractions import Fraction

        delta = value - self._last[key]
        self._last[key] = value
        return Fraction(delta) / Fraction(period).limit_denominator()

    @property
    def node_id(self) -> int:
        return self.node.node_id

    @property
    def online(self) -> bool:
        return self.node.online

    def join(self, bootstrap):
        """Generator: join the overlay and start the periodic services."""
        yield from self.node.join(bootstrap)
        self.start()

    def start(self):
        self.node.start_maintenance()
        self.storage.start()
        self.hub.start()
        self.monitor.start()

    def leave(self):
        """Generator: graceful departure with replica hand-off."""
        yield from self.storage.leave()

    def crash(self):
        self.node.crash()

    def __repr__(self):
        return f"<peer {self.user.username}>"
