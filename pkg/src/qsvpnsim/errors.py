"""Exception hierarchy for the simulator.

Every error that can cross a simulated node boundary must be registered in
``ERROR_REGISTRY`` so the RPC layer can reconstruct it on the caller side.
"""

from __future__ import annotations


class QsVpnError(Exception):
    """Base class for all simulator errors."""


# --- keystore -------------------------------------------------------------

class DuplicateKeyId(QsVpnError):
    pass


class MalformedBlock(QsVpnError):
    pass


class InsufficientKeyMaterial(QsVpnError):
    pass


class NoSuchPair(QsVpnError):
    pass


class UnknownPpkId(QsVpnError):
    pass


class KeyExpired(QsVpnError):
    pass


class KeyAlreadyConsumed(QsVpnError):
    pass


class UnknownSource(QsVpnError):
    pass


# --- qkd simulation -------------------------------------------------------

class LinkUnknown(QsVpnError):
    pass


class AlreadyStarted(QsVpnError):
    pass


# --- ETSI delivery --------------------------------------------------------

class UnknownPeer(QsVpnError):
    pass


class BadSize(QsVpnError):
    pass


class NoKeySourceForPair(QsVpnError):
    pass


class ClosedSession(QsVpnError):
    pass


class OutOfOrderIndex(QsVpnError):
    pass


class UnknownSession(QsVpnError):
    pass


# --- KEM / KMS ------------------------------------------------------------

class UnknownParams(QsVpnError):
    pass


class MalformedKey(QsVpnError):
    pass


class MalformedCiphertext(QsVpnError):
    pass


class ChannelDown(QsVpnError):
    pass


class AuthFailure(QsVpnError):
    pass


class KemFailure(QsVpnError):
    pass


class BadLength(QsVpnError):
    pass


# --- SDN control ----------------------------------------------------------

class DuplicateNode(QsVpnError):
    pass


class InvalidDescriptor(QsVpnError):
    pass


class UnknownLink(QsVpnError):
    pass


class NoPathAvailable(QsVpnError):
    pass


class NodeUnreachable(QsVpnError):
    pass


# --- SKIP / IKE -----------------------------------------------------------

class NoKeyAvailable(QsVpnError):
    pass


class BadPpk(QsVpnError):
    pass


class PpkIdUnknownAtResponder(QsVpnError):
    pass


class HubUnreachable(QsVpnError):
    pass


class UnknownSpoke(QsVpnError):
    pass


class NoRoute(QsVpnError):
    pass


class DecryptFailure(QsVpnError):
    pass


class ReplayedSequence(QsVpnError):
    pass


# --- transport / harness --------------------------------------------------

class LinkDown(QsVpnError):
    pass


class TransportDown(QsVpnError):
    pass


class RpcTimeout(QsVpnError, TimeoutError):
    pass


class SchemaError(QsVpnError):
    pass


class DisconnectedTopology(QsVpnError):
    pass


class ScenarioPanic(QsVpnError):
    """An invariant was breached during a run; carries diagnostics."""


class ReportIoError(QsVpnError):
    pass


ERROR_REGISTRY = {
    cls.__name__: cls
    for cls in [
        DuplicateKeyId, MalformedBlock, InsufficientKeyMaterial, NoSuchPair,
        UnknownPpkId, KeyExpired, KeyAlreadyConsumed, UnknownSource,
        LinkUnknown, AlreadyStarted,
        UnknownPeer, BadSize, NoKeySourceForPair, ClosedSession,
        OutOfOrderIndex, UnknownSession,
        UnknownParams, MalformedKey, MalformedCiphertext, ChannelDown,
        AuthFailure, KemFailure, BadLength,
        DuplicateNode, InvalidDescriptor, UnknownLink, NoPathAvailable,
        NodeUnreachable,
        NoKeyAvailable, BadPpk, PpkIdUnknownAtResponder, HubUnreachable,
        UnknownSpoke, NoRoute, DecryptFailure, ReplayedSequence,
        LinkDown, TransportDown, RpcTimeout, SchemaError,
        DisconnectedTopology, ScenarioPanic, ReportIoError,
    ]
}


def rebuild_error(name: str, message: str) -> QsVpnError:
    """Reconstruct a registered error from its wire form (name + message)."""
    cls = ERROR_REGISTRY.get(name, QsVpnError)
    return cls(message)
