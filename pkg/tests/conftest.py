import os

import pytest

from reed.client import (ClientIdentity, Connection, StoreSession,
                         register_identity)
from reed.keygen import KeyManagerService, KeySession, ManagerKeyPair
from reed.server import FrameServer, StorageService


@pytest.fixture(scope="session")
def manager_keypair():
    return ManagerKeyPair.generate()


@pytest.fixture(scope="session")
def identities():
    # RSA access keys are the slow part; share one set across the session.
    return {name: ClientIdentity.create(name) for name in ("alice", "bob", "carol")}


class Cluster:
    """One storage server plus one key manager, with session helpers."""

    def __init__(self, root: str, manager_keypair: ManagerKeyPair, **manager_kwargs):
        self.root = root
        self.data_root = os.path.join(root, "data")
        self.key_root = os.path.join(root, "keys")
        self.service = StorageService(self.data_root, self.key_root)
        self.store_server = FrameServer(self.service).start()
        self.manager_service = KeyManagerService(manager_keypair, **manager_kwargs)
        self.manager_server = FrameServer(self.manager_service).start()
        self._connections = []

    def _connect(self, server: FrameServer) -> Connection:
        conn = Connection(*server.address)
        self._connections.append(conn)
        return conn

    def store_session(self) -> StoreSession:
        return StoreSession(self._connect(self.store_server))

    def key_session(self) -> KeySession:
        return KeySession(self._connect(self.manager_server))

    def register(self, *identities: ClientIdentity) -> None:
        session = self.store_session()
        for identity in identities:
            register_identity(session, identity)

    def restart_storage(self) -> None:
        """Simulate a server crash/restart over the same on-disk state."""
        self.store_server.stop()
        self.service.close()
        self.service = StorageService(self.data_root, self.key_root)
        self.store_server = FrameServer(self.service).start()

    def stop(self) -> None:
        for conn in self._connections:
            conn.close()
        self.store_server.stop()
        self.manager_server.stop()
        self.service.close()


@pytest.fixture
def cluster(tmp_path, manager_keypair):
    c = Cluster(str(tmp_path), manager_keypair)
    yield c
    c.stop()
