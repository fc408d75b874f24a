"""Run configuration; loadable from ``key=value`` files."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace


@dataclass(frozen=True)
class Config:
    # storage
    k: int = 4
    cache_ttl_s: float = 30.0
    quota: int = 0  # absolute per-node object limit, 0 = unlimited
    divert_min: int = 48  # soft limit only applies above this many objects
    divert_factor: float = 1.5  # ... and above this multiple of the leaf-set mean
    balance_rate: float = 5.0  # requests/s per file before redirecting
    sync_every: int = 10  # maintenance rounds between full replica syncs
    # dds
    s: int = 16
    M: int = 4
    D: int = 32
    search_bits: int = 64
    # overlay
    alpha: int = 3
    leaf_size: int = 16
    bucket_cap: int = 20
    lookup_width: int = 20
    maintenance_s: float = 30.0
    rpc_timeout_ms: int = 1500
    # network
    latency_min: int = 10
    latency_max: int = 50
    loss: float = 0.0
    # monitoring
    monitor_s: float = 10.0
    # social
    chunk_size: int = 65536
    notify_poll_s: float = 60.0
    photo_bytes: int = 2048
    file_bytes: int = 1024
    # harness
    warmup_s: float = 600.0
    gap_s: float = 60.0
    provider: str = "double"

    @property
    def table_capacity(self) -> int:
        return 160 * self.bucket_cap

    def with_(self, **kw) -> "Config":
        return replace(self, **kw)

    @classmethod
    def parse(cls, text: str) -> "Config":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value")
            key, value = (p.strip() for p in line.split("=", 1))
            if key == "latency":
                lo, _, hi = value.partition("-")
                kw["latency_min"], kw["latency_max"] = int(lo), int(hi or lo)
                continue
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            t = types[key]
            kw[key] = value if t == "str" else (int(value) if t == "int" else float(value))
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path) as fh:
            return cls.parse(fh.read())
