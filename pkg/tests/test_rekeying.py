import hashlib
import os
import struct

import pytest

from reed import caont, rekeying
from reed.client import StoreSession
from reed.errors import (AccessDenied, AtInitialState, NotOwner, PolicyEmpty,
                         UnknownUser, VersionConflict)
from reed.rekeying import (DerivationKeyPair, derive_file_key,
                           generate_access_keypair, new_state, unwind,
                           unwind_to, unwrap_state, wind, wrap_state,
                           wrapped_policy, wrapped_version)
from reed.server import StorageService
from reed.wire import LocalBackend


@pytest.fixture(scope="module")
def owner_keys():
    return DerivationKeyPair.generate()


@pytest.fixture(scope="module")
def access_keys():
    return {name: generate_access_keypair() for name in ("alice", "bob", "carol")}


@pytest.fixture(scope="module")
def directory(access_keys):
    return {name: key.public_key() for name, key in access_keys.items()}


# -- key regression ------------------------------------------------------------


def test_wind_unwind_inverse_chains(owner_keys):
    state = new_state("alice", owner_keys)
    for k in range(1, 6):
        forward = state
        for _ in range(k):
            forward = wind(forward, owner_keys)
        assert forward.version == k
        back = forward
        for _ in range(k):
            back = unwind(back)
        assert back == state


def test_wind_requires_private_key(owner_keys):
    state = new_state("alice", owner_keys)
    with pytest.raises(NotOwner):
        wind(state, None)
    with pytest.raises(NotOwner):
        wind(state, DerivationKeyPair.generate())  # some other owner's keys


def test_unwind_at_version_zero(owner_keys):
    with pytest.raises(AtInitialState):
        unwind(new_state("alice", owner_keys))


def test_unwind_needs_only_embedded_public_part(owner_keys):
    # the state value plus (n, e) ride inside the state itself
    s1 = wind(new_state("alice", owner_keys), owner_keys)
    assert unwind(s1).version == 0


def test_unwind_to(owner_keys):
    state = new_state("alice", owner_keys)
    s3 = state
    for _ in range(3):
        s3 = wind(s3, owner_keys)
    assert unwind_to(s3, 0) == state
    assert unwind_to(s3, 3) == s3
    with pytest.raises(AtInitialState):
        unwind_to(state, 2)


def test_initial_states_are_distinct(owner_keys):
    assert new_state("alice", owner_keys).value != new_state("alice", owner_keys).value


def test_version_strictly_increases(owner_keys):
    state = new_state("alice", owner_keys)
    wound = wind(state, owner_keys)
    assert wound.version == state.version + 1


# -- file keys ------------------------------------------------------------------


def test_file_key_reference_recompute(owner_keys):
    state = new_state("alice", owner_keys)
    width = (owner_keys.n.bit_length() + 7) // 8
    expected = hashlib.sha256(state.value.to_bytes(width, "big")
                              + struct.pack(">I", state.version)).digest()
    assert derive_file_key(state) == expected
    assert len(expected) == 32


def test_file_key_changes_across_versions(owner_keys):
    state = new_state("alice", owner_keys)
    assert derive_file_key(state) != derive_file_key(wind(state, owner_keys))


def test_equal_states_equal_keys(owner_keys):
    state = new_state("alice", owner_keys)
    assert derive_file_key(state) == derive_file_key(unwind(wind(state, owner_keys)))


# -- policy wraps ------------------------------------------------------------------


def test_wrap_unwrap_round_trip(owner_keys, access_keys, directory):
    state = new_state("alice", owner_keys)
    blob = wrap_state(state, ["alice", "bob"], directory)
    assert unwrap_state(blob, access_keys["alice"], "alice") == state
    assert unwrap_state(blob, access_keys["bob"], "bob") == state
    assert wrapped_version(blob) == 0
    assert wrapped_policy(blob) == ["alice", "bob"]


def test_absent_user_cannot_unwrap(owner_keys, access_keys, directory):
    blob = wrap_state(new_state("alice", owner_keys), ["alice"], directory)
    with pytest.raises(AccessDenied):
        unwrap_state(blob, access_keys["carol"], "carol")


def test_wrong_private_key_denied(owner_keys, access_keys, directory):
    blob = wrap_state(new_state("alice", owner_keys), ["alice", "bob"], directory)
    with pytest.raises(AccessDenied):
        unwrap_state(blob, access_keys["carol"], "alice")


def test_tampered_wrap_denied(owner_keys, access_keys, directory):
    blob = wrap_state(new_state("alice", owner_keys), ["alice"], directory)
    for pos in (0, 4, 12, len(blob) // 2, len(blob) - 1):
        mod = bytearray(blob)
        mod[pos] ^= 1
        with pytest.raises(AccessDenied):
            unwrap_state(bytes(mod), access_keys["alice"], "alice")


def test_wrap_requires_registered_users(owner_keys, directory):
    with pytest.raises(UnknownUser):
        wrap_state(new_state("alice", owner_keys), ["alice", "mallory"], directory)


def test_wrap_rejects_empty_policy(owner_keys, directory):
    with pytest.raises(PolicyEmpty):
        wrap_state(new_state("alice", owner_keys), [], directory)


def test_wrap_size_grows_linearly_with_policy(owner_keys):
    keys = {f"u{i}": generate_access_keypair() for i in range(4)}
    directory = {name: key.public_key() for name, key in keys.items()}
    state = new_state("u0", owner_keys)
    sizes = [len(wrap_state(state, [f"u{j}" for j in range(i + 1)], directory))
             for i in range(4)]
    deltas = [b - a for a, b in zip(sizes, sizes[1:])]
    assert all(d == deltas[0] for d in deltas)  # one encapsulation per user
    assert len(wrapped_policy(wrap_state(state, ["u0"], directory))) == 1


def test_single_user_policy_has_one_encapsulation(owner_keys, directory):
    blob = wrap_state(new_state("alice", owner_keys), ["alice"], directory)
    assert wrapped_policy(blob) == ["alice"]


# -- decryptability across versions --------------------------------------------------


def test_decryptability_matrix(owner_keys):
    """A reader at version v opens stub files of versions <= v and no newer."""
    states = [new_state("alice", owner_keys)]
    for _ in range(3):
        states.append(wind(states[-1], owner_keys))
    stub_blobs = [caont.encrypt_stub_file([os.urandom(64)], derive_file_key(s))
                  for s in states]
    for held in range(len(states)):
        for target in range(len(states)):
            if target <= held:
                key = derive_file_key(unwind_to(states[held], target))
                caont.decrypt_stub_file(stub_blobs[target], key)
            else:
                # no unwind sequence reaches a future version
                with pytest.raises(AtInitialState):
                    unwind_to(states[held], target)
                for v in range(held + 1):
                    key = derive_file_key(unwind_to(states[held], v))
                    with pytest.raises(Exception):
                        caont.decrypt_stub_file(stub_blobs[target], key)


# -- rekey procedure over a real store ------------------------------------------------


@pytest.fixture
def store(tmp_path):
    service = StorageService(str(tmp_path / "data"), str(tmp_path / "keys"))
    yield StoreSession(LocalBackend(service))
    service.close()


def _seed_file(store, owner_keys, access_keys, directory, policy=("alice", "bob")):
    state = new_state("alice", owner_keys)
    stubs = [os.urandom(64) for _ in range(3)]
    store.put_stub("file-1", 0, caont.encrypt_stub_file(stubs, derive_file_key(state)))
    store.put_state("file-1", 0, wrap_state(state, policy, directory))
    for name in ("alice", "bob", "carol"):
        store.put_user_key(name, rekeying.access_public_pem(access_keys[name]))
    return state, stubs


def test_lazy_rekey_moves_only_the_state(store, owner_keys, access_keys, directory):
    state, stubs = _seed_file(store, owner_keys, access_keys, directory)
    stub_before = store.get_stub("file-1")
    version = rekeying.rekey(store, file_id="file-1", new_policy=["alice"],
                             mode="lazy", user_id="alice",
                             access_private_key=access_keys["alice"],
                             derivation=owner_keys)
    assert version == 1
    assert store.get_stub("file-1") == stub_before  # untouched
    got_version, wrapped = store.get_state("file-1")
    assert got_version == 1
    new = unwrap_state(wrapped, access_keys["alice"], "alice")
    # the new state still reads the old stub file after one unwind
    old_key = derive_file_key(unwind_to(new, 0))
    assert caont.decrypt_stub_file(stub_before[1], old_key) == stubs


def test_active_rekey_reencrypts_stubs(store, owner_keys, access_keys, directory):
    state, stubs = _seed_file(store, owner_keys, access_keys, directory)
    _, old_blob = store.get_stub("file-1")
    rekeying.rekey(store, file_id="file-1", new_policy=["alice"], mode="active",
                   user_id="alice", access_private_key=access_keys["alice"],
                   derivation=owner_keys)
    new_version, new_blob = store.get_stub("file-1")
    assert new_version == 1
    assert new_blob != old_blob
    new_state_obj = unwrap_state(store.get_state("file-1")[1],
                                 access_keys["alice"], "alice")
    assert caont.decrypt_stub_file(new_blob, derive_file_key(new_state_obj)) == stubs
    with pytest.raises(Exception):
        caont.decrypt_stub_file(new_blob, derive_file_key(state))


def test_rekey_revokes_absent_users(store, owner_keys, access_keys, directory):
    _seed_file(store, owner_keys, access_keys, directory)
    rekeying.rekey(store, file_id="file-1", new_policy=["alice"], mode="lazy",
                   user_id="alice", access_private_key=access_keys["alice"],
                   derivation=owner_keys)
    _, wrapped = store.get_state("file-1")
    with pytest.raises(AccessDenied):
        unwrap_state(wrapped, access_keys["bob"], "bob")


def test_rekey_requires_ownership(store, owner_keys, access_keys, directory):
    _seed_file(store, owner_keys, access_keys, directory)
    with pytest.raises(NotOwner):
        rekeying.rekey(store, file_id="file-1", new_policy=["bob"], mode="lazy",
                       user_id="bob", access_private_key=access_keys["bob"],
                       derivation=DerivationKeyPair.generate())


def test_rekey_unknown_policy_member(store, owner_keys, access_keys, directory):
    _seed_file(store, owner_keys, access_keys, directory)
    with pytest.raises(UnknownUser):
        rekeying.rekey(store, file_id="file-1", new_policy=["alice", "mallory"],
                       mode="lazy", user_id="alice",
                       access_private_key=access_keys["alice"],
                       derivation=owner_keys)


def test_concurrent_rekeys_serialize_on_version(store, owner_keys, access_keys,
                                                directory):
    state, _ = _seed_file(store, owner_keys, access_keys, directory)
    # a second writer that read version 0 loses the compare-and-set
    rekeying.rekey(store, file_id="file-1", new_policy=["alice"], mode="lazy",
                   user_id="alice", access_private_key=access_keys["alice"],
                   derivation=owner_keys)
    stale = wrap_state(wind(state, owner_keys), ["alice"], directory)
    with pytest.raises(VersionConflict):
        store.put_state("file-1", 1, stale, expected_prev=0)
