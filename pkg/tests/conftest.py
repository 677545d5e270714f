"""Shared fixtures: reference topologies over both transports."""

from __future__ import annotations

from pathlib import Path

import pytest

from bbs.config import GenesisConfig, parse_genesis
from bbs.topology import Topology, build_topology


def three_org_doc(seed: str, transport: str = "sim") -> dict:
    """The reference deployment: three orgs, one peer and client each."""
    return {
        "channel": "filechannel",
        "seed": seed,
        "transport": transport,
        "orgs": [
            {
                "name": "Org1",
                "peers": ["peer0"],
                "clients": ["client0"],
                "orderers": ["orderer0"],
            },
            {"name": "Org2", "peers": ["peer0"], "clients": ["client0"]},
            {"name": "Org3", "peers": ["peer0"], "clients": ["client0"]},
        ],
    }


def three_org_config(seed: str, transport: str = "sim") -> GenesisConfig:
    return parse_genesis(three_org_doc(seed, transport))


@pytest.fixture
def sim_topology(tmp_path: Path, request: pytest.FixtureRequest):
    """A fresh simulated three-org topology, torn down after the test."""
    topo = build_topology(three_org_config(f"sim/{request.node.name}"), tmp_path)
    yield topo
    topo.stop()


@pytest.fixture(params=["sim", "socket"])
def any_topology(tmp_path: Path, request: pytest.FixtureRequest):
    """The same three-org deployment on either transport."""
    topo = build_topology(
        three_org_config(f"{request.param}/{request.node.name}", request.param),
        tmp_path,
    )
    yield topo
    topo.stop()
