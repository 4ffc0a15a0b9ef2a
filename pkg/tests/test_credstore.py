"""Credential store tests, checked against an independent brute-force validator."""

from __future__ import annotations

import random

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
from cryptography.exceptions import InvalidSignature

from gridforge import encoding
from gridforge.credstore import (
    CERT_CA,
    CERT_END_ENTITY,
    CERT_PROXY,
    Certificate,
    CredentialSet,
    TrustAnchorStore,
    chain_remaining_depth,
    create_ca,
    create_proxy,
    describe_credential,
    generate_keypair,
    issue_identity,
    load_credential,
    same_user_trust,
    save_certificate,
    save_credential,
    sign_bytes,
    validate_chain,
    verify_bytes,
)
from gridforge.errors import (
    DelegationDepthExhausted,
    GridForgeError,
    InvalidName,
    InvalidValidity,
    MalformedDocument,
    NotACA,
    ParentExpired,
    UntrustedRoot,
    ValidityExceedsIssuer,
)

from conftest import HOUR, NOW


# -- independent oracle -----------------------------------------------------------
#
# Re-derives chain acceptance from first principles, over every prefix, without
# touching validate_chain: raw Ed25519 verification over a literally rebuilt
# body document, plus structural, naming, window, and depth accounting rules.

def _oracle_body(cert: Certificate) -> bytes:
    return encoding.encode({
        "serial": cert.serial,
        "subject": cert.subject,
        "issuer": cert.issuer,
        "subject_public_key": cert.subject_public_key,
        "not_before": cert.not_before,
        "not_after": cert.not_after,
        "cert_type": cert.cert_type,
        "max_delegation_depth": cert.max_delegation_depth,
        "extensions": dict(cert.extensions),
        "scheme": cert.scheme,
    })


def _oracle_sig_ok(key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def oracle_accepts(chain, anchor_certs, now) -> bool:
    """True iff every prefix of the chain satisfies every rule."""
    if not chain:
        return False
    anchor_bytes = {encoding.encode(a.to_doc()) for a in anchor_certs}
    if encoding.encode(chain[0].to_doc()) not in anchor_bytes:
        return False
    for prefix_len in range(1, len(chain) + 1):
        prefix = chain[:prefix_len]
        for i, cert in enumerate(prefix):
            parent = prefix[i - 1] if i else cert
            if i == 0:
                if cert.cert_type != CERT_CA or cert.issuer != cert.subject:
                    return False
            else:
                if cert.issuer != parent.subject:
                    return False
                pair = (parent.cert_type, cert.cert_type)
                if pair not in {
                    (CERT_CA, CERT_CA),
                    (CERT_CA, CERT_END_ENTITY),
                    (CERT_END_ENTITY, CERT_PROXY),
                    (CERT_PROXY, CERT_PROXY),
                }:
                    return False
            if cert.cert_type == CERT_PROXY:
                if cert.subject != f"{parent.subject}/CN=proxy-{cert.serial}":
                    return False
            if cert.scheme != "ed25519":
                return False
            if not _oracle_sig_ok(parent.subject_public_key, _oracle_body(cert), cert.signature):
                return False
            if not (cert.not_before <= now < cert.not_after):
                return False
        for i, cert in enumerate(prefix):
            if cert.cert_type == CERT_CA or cert.max_delegation_depth is None:
                continue
            below = sum(1 for c in prefix[i + 1:] if c.cert_type == CERT_PROXY)
            if below > cert.max_delegation_depth:
                return False
    return True


def oracle_remaining(chain) -> int | None:
    values = []
    for i, cert in enumerate(chain):
        if cert.cert_type == CERT_CA or cert.max_delegation_depth is None:
            continue
        below = sum(1 for c in chain[i + 1:] if c.cert_type == CERT_PROXY)
        values.append(cert.max_delegation_depth - below)
    return min(values) if values else None


# -- key primitives ---------------------------------------------------------------


def test_keypair_sign_roundtrip():
    priv, pub = generate_keypair()
    sig = sign_bytes(priv, b"message")
    assert verify_bytes(pub, b"message", sig)


def test_keypairs_distinct():
    _, pub1 = generate_keypair()
    _, pub2 = generate_keypair()
    assert pub1 != pub2


def test_verify_with_wrong_key_fails():
    priv, _ = generate_keypair()
    _, other_pub = generate_keypair()
    sig = sign_bytes(priv, b"message")
    assert not verify_bytes(other_pub, b"message", sig)


# -- creation ops -----------------------------------------------------------------


def test_create_ca_self_signed():
    ca = create_ca("/O=TestGrid/CN=CA", (NOW, NOW + 365 * 24 * HOUR))
    assert len(ca.chain) == 1
    assert ca.leaf.issuer == ca.leaf.subject
    assert ca.leaf.cert_type == CERT_CA


def test_create_ca_empty_name():
    with pytest.raises(InvalidName):
        create_ca("", (NOW, NOW + HOUR))


def test_create_ca_reversed_interval():
    with pytest.raises(InvalidValidity):
        create_ca("/O=G/CN=CA", (NOW + HOUR, NOW))


def test_issue_identity_roundtrip(user_ca, anchors):
    cred = issue_identity(user_ca, "/O=TestGrid/CN=Alice", (NOW, NOW + HOUR))
    who = validate_chain(cred.chain, anchors, NOW + 1)
    assert who.effective_identity == "/O=TestGrid/CN=Alice"
    assert who.leaf_subject == "/O=TestGrid/CN=Alice"
    assert who.remaining_delegation_depth is None
    assert oracle_accepts(cred.chain, [user_ca.leaf], NOW + 1)


def test_issue_identity_past_ca_expiry(user_ca):
    with pytest.raises(ValidityExceedsIssuer):
        issue_identity(user_ca, "/O=G/CN=X", (NOW, user_ca.leaf.not_after + 1))


def test_issue_identity_from_end_entity(alice):
    with pytest.raises(NotACA):
        issue_identity(alice, "/O=G/CN=Y", (NOW, NOW + HOUR))


def test_proxy_depth_arithmetic(alice, anchors, user_ca):
    # budget 2 on the first proxy: two more levels fit, a third does not
    p1 = create_proxy(alice, (NOW, NOW + HOUR), depth=2, now=NOW)
    p2 = create_proxy(p1, (NOW, NOW + HOUR), now=NOW)
    p3 = create_proxy(p2, (NOW, NOW + HOUR), now=NOW)
    for cred in (p1, p2, p3):
        assert validate_chain(cred.chain, anchors, NOW)
        assert oracle_accepts(cred.chain, [user_ca.leaf], NOW)
    with pytest.raises(DelegationDepthExhausted):
        create_proxy(p3, (NOW, NOW + HOUR), now=NOW)


def test_proxy_expired_parent(user_ca):
    short = issue_identity(user_ca, "/O=G/CN=Brief", (NOW - HOUR, NOW - 1))
    with pytest.raises(ParentExpired):
        create_proxy(short, (NOW, NOW + HOUR), now=NOW)


def test_proxy_validity_clamped(alice):
    proxy = create_proxy(alice, (NOW, alice.leaf.not_after + 99 * HOUR), now=NOW)
    assert proxy.leaf.not_after == alice.leaf.not_after


# -- validation -------------------------------------------------------------------


def test_validate_two_level_chain(alice, anchors):
    who = validate_chain(alice.chain, anchors, NOW)
    assert who.effective_identity == alice.leaf.subject


def test_validate_proxy_of_proxy(alice, anchors, user_ca):
    # expected remaining depth derived with the prefix oracle and frozen:
    # P1 declared 2 with one proxy below -> 1; P2 declared 1 with none -> 1
    p1 = create_proxy(alice, (NOW, NOW + HOUR), depth=2, now=NOW)
    p2 = create_proxy(p1, (NOW, NOW + HOUR), now=NOW)
    assert oracle_accepts(p2.chain, [user_ca.leaf], NOW)
    assert oracle_remaining(p2.chain) == 1
    who = validate_chain(p2.chain, anchors, NOW)
    assert who.effective_identity == alice.leaf.subject
    assert who.leaf_subject == p2.leaf.subject
    assert who.remaining_delegation_depth == 1
    assert chain_remaining_depth(p2.chain) == oracle_remaining(p2.chain)


def test_validate_unanchored_root(alice):
    other = create_ca("/O=Other/CN=CA", (NOW, NOW + HOUR))
    with pytest.raises(UntrustedRoot):
        validate_chain(alice.chain, TrustAnchorStore([other.leaf]), NOW)


def test_same_user_trust(alice, bob):
    pa1 = create_proxy(alice, (NOW, NOW + HOUR), now=NOW)
    pa2 = create_proxy(alice, (NOW, NOW + HOUR), now=NOW)
    pb = create_proxy(bob, (NOW, NOW + HOUR), now=NOW)
    ia1, ia2 = describe_credential(pa1), describe_credential(pa2)
    ib = describe_credential(pb)
    ialice = describe_credential(alice)
    assert same_user_trust(ia1, ia2)
    assert not same_user_trust(ia1, ib)
    assert not same_user_trust(ialice, ia1)  # end-entity leaf does not qualify


# -- invariants --------------------------------------------------------------------


def test_roundtrip_and_byte_perturbation(alice, anchors, user_ca):
    proxy = create_proxy(alice, (NOW, NOW + HOUR), depth=1, now=NOW)
    assert validate_chain(proxy.chain, anchors, NOW)
    rng = random.Random(7)
    encoded = [c.encoded() for c in proxy.chain]
    for _ in range(60):
        idx = rng.randrange(len(encoded))
        data = bytearray(encoded[idx])
        data[rng.randrange(len(data))] ^= 1 << rng.randrange(8)
        try:
            tampered = Certificate.from_doc(encoding.decode(bytes(data)))
        except (MalformedDocument, GridForgeError):
            continue  # structural damage counts as detection
        chain = list(proxy.chain)
        chain[idx] = tampered
        with pytest.raises(GridForgeError):
            validate_chain(tuple(chain), anchors, NOW)
        assert not oracle_accepts(tuple(chain), [user_ca.leaf], NOW)


@pytest.mark.parametrize("budget", [0, 1, 2, 3])
def test_depth_safety_exhaustive(user_ca, anchors, budget):
    """No sequence of proxy creations yields a validating chain with more than
    `budget` proxies below the budget-carrying certificate."""
    alice = issue_identity(user_ca, f"/O=G/CN=D{budget}", (NOW, NOW + 24 * HOUR))
    if budget == 0:
        base = alice
        budget_index = 1
        with pytest.raises(DelegationDepthExhausted):
            create_proxy(
                create_proxy(base, (NOW, NOW + HOUR), depth=0, now=NOW),
                (NOW, NOW + HOUR),
                now=NOW,
            )
    frontier = [create_proxy(alice, (NOW, NOW + HOUR), depth=budget, now=NOW)]
    budget_index = 2  # position of the budget-carrying proxy
    seen = []
    for _level in range(budget + 2):
        next_frontier = []
        for cred in frontier:
            seen.append(cred)
            for depth_request in (None, 0, 1, 5):
                try:
                    child = create_proxy(cred, (NOW, NOW + HOUR), depth=depth_request, now=NOW)
                except DelegationDepthExhausted:
                    continue
                next_frontier.append(child)
        frontier = next_frontier
    for cred in seen + frontier:
        proxies_below = sum(
            1 for c in cred.chain[budget_index + 1:] if c.cert_type == CERT_PROXY
        )
        accepted = oracle_accepts(cred.chain, [user_ca.leaf], NOW)
        assert accepted, "constructively built chains must validate"
        validate_chain(cred.chain, anchors, NOW)
        assert proxies_below <= budget


def test_effective_identity_stable_under_delegation(alice, anchors):
    cred = alice
    for _ in range(3):
        cred = create_proxy(cred, (NOW, NOW + HOUR), now=NOW)
        who = validate_chain(cred.chain, anchors, NOW)
        assert who.effective_identity == alice.leaf.subject


def test_canonical_encoding_deterministic(alice):
    assert alice.leaf.encoded() == alice.leaf.encoded()
    copy = Certificate.from_doc(encoding.decode(alice.leaf.encoded()))
    assert copy.encoded() == alice.leaf.encoded()


# -- serialization ------------------------------------------------------------------


def test_credential_file_roundtrip(tmp_path, alice, anchors):
    cert_path = tmp_path / "alice.cert"
    key_path = tmp_path / "alice.key"
    save_credential(alice, str(cert_path), str(key_path))
    assert (key_path.stat().st_mode & 0o777) == 0o600
    loaded = load_credential(str(cert_path), str(key_path))
    assert loaded.chain == alice.chain
    assert validate_chain(loaded.chain, anchors, NOW)


def test_anchor_store_loads_directory(tmp_path, user_ca, host_ca):
    save_certificate(user_ca.leaf, str(tmp_path / "user.cert"))
    save_certificate(host_ca.leaf, str(tmp_path / "host.cert"))
    store = TrustAnchorStore.load_dir(str(tmp_path))
    assert len(store) == 2
    assert store.contains(user_ca.leaf) and store.contains(host_ca.leaf)


def test_anchor_store_rejects_non_ca(alice):
    with pytest.raises(NotACA):
        TrustAnchorStore([alice.leaf])
