"""INI configuration shared by the CLI tools.

Documented keys (all optional; defaults shown in DEFAULTS below):

    [client]  server, manager, identity_dir, scheme, keying,
              encrypt_workers, allow_basic_with_similarity
    [chunk]   mode, fixed_size, min_size, avg_size, max_size
    [segment] avg_size
    [server]  listen, data_root, key_root, container_size
    [manager] listen, key_file, rate_capacity, rate_refill, batch_cap
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

from .chunking import ChunkingParams, SegmentationParams

DEFAULTS = {
    "client": {
        "server": "127.0.0.1:9601",
        "manager": "127.0.0.1:9602",
        "identity_dir": "./reed-identity",
        "scheme": "enhanced",
        "keying": "similarity",
        "encrypt_workers": "2",
        "allow_basic_with_similarity": "false",
    },
    "chunk": {
        "mode": "rabin",
        "fixed_size": "8192",
        "min_size": "2048",
        "avg_size": "8192",
        "max_size": "16384",
    },
    "segment": {
        "avg_size": "1048576",
    },
    "server": {
        "listen": "127.0.0.1:9601",
        "data_root": "./reed-data",
        "key_root": "./reed-keys",
        "container_size": "4194304",
    },
    "manager": {
        "listen": "127.0.0.1:9602",
        "key_file": "./reed-manager.pem",
        "rate_capacity": "10000",
        "rate_refill": "10000",
        "batch_cap": "256",
    },
}


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


def parse_size(text: str) -> int:
    """Accepts plain byte counts plus K/M/G suffixes (powers of 1024)."""
    text = text.strip()
    units = {"K": 1024, "M": 1024 ** 2, "G": 1024 ** 3}
    if text and text[-1].upper() in units:
        return int(float(text[:-1]) * units[text[-1].upper()])
    return int(text)


@dataclass
class Config:
    parser: configparser.ConfigParser

    @classmethod
    def load(cls, path: str | None = None) -> "Config":
        parser = configparser.ConfigParser()
        parser.read_dict(DEFAULTS)
        path = path or os.environ.get("REED_CONFIG")
        if path:
            if not os.path.exists(path):
                raise FileNotFoundError(f"config file {path} does not exist")
            parser.read(path)
        return cls(parser=parser)

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key)

    def getint(self, section: str, key: str) -> int:
        return parse_size(self.parser.get(section, key))

    def getbool(self, section: str, key: str) -> bool:
        return self.parser.getboolean(section, key)

    @property
    def chunk_params(self) -> ChunkingParams:
        return ChunkingParams(
            mode=self.get("chunk", "mode"),
            fixed_size=self.getint("chunk", "fixed_size"),
            min_size=self.getint("chunk", "min_size"),
            avg_size=self.getint("chunk", "avg_size"),
            max_size=self.getint("chunk", "max_size"),
        )

    @property
    def segment_params(self) -> SegmentationParams:
        chunk = self.chunk_params
        avg_chunk = chunk.avg_size if chunk.mode == "rabin" else chunk.fixed_size
        return SegmentationParams(avg_size=self.getint("segment", "avg_size"),
                                  avg_chunk_size=avg_chunk)
