"""Inter-region links and the three communication fault models.

Every ordered pair of regions that share at least one angle gets a directed
link.  Randomness is drawn from counter-based Philox streams keyed by
``(run seed, sender, receiver)``, with the iteration number in the counter, so
draws never depend on the order in which links are served.

Draws per link and iteration (fixed, so runs are reproducible):

* ``ideal``: none.
* ``gaussian``: ``n`` standard normals (none when ``sigma_noise == 0``).
* ``bad_data``: ``n`` uniforms U2 then ``n`` uniforms U1, always drawn.
  With ``bad_data_per_message`` a single U2 then ``n`` U1.
* ``intermittent_loss``: one uniform U for the channel state.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CommsError",
    "ChannelModel",
    "LinkState",
    "CHANNEL_KINDS",
    "stream_key",
    "link_rng",
    "apply_gaussian",
    "apply_bad_data",
    "step_loss_channel",
    "transmit",
    "make_links",
]

CHANNEL_KINDS = ("ideal", "gaussian", "bad_data", "intermittent_loss")


class CommsError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelModel:
    kind: str = "ideal"
    sigma_noise: float = 0.0     # radians
    R: float = 0.0               # radians, largest bad-data error
    p_bad: float = 0.0
    lambda_f: float = 0.0
    lambda_r: float = 0.0
    symmetric_loss: bool = False
    bad_data_per_message: bool = False

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise CommsError(f"unknown channel kind {self.kind!r}; choose from {CHANNEL_KINDS}")
        if not self.sigma_noise >= 0:
            raise CommsError("sigma_noise must be non-negative")
        if not self.R >= 0:
            raise CommsError("R must be non-negative")
        for name in ("p_bad", "lambda_f", "lambda_r"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CommsError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def ideal(cls):
        return cls("ideal")

    @classmethod
    def gaussian(cls, sigma):
        return cls("gaussian", sigma_noise=sigma)

    @classmethod
    def bad_data(cls, R, p, per_message=False):
        return cls("bad_data", R=R, p_bad=p, bad_data_per_message=per_message)

    @classmethod
    def loss(cls, lambda_f, lambda_r, symmetric=False):
        return cls("intermittent_loss", lambda_f=lambda_f, lambda_r=lambda_r, symmetric_loss=symmetric)

    def describe(self) -> dict:
        """Parameters relevant to ``kind`` (used for labels and seeds)."""
        keys = {
            "ideal": (),
            "gaussian": ("sigma_noise",),
            "bad_data": ("R", "p_bad", "bad_data_per_message"),
            "intermittent_loss": ("lambda_f", "lambda_r", "symmetric_loss"),
        }[self.kind]
        return {"kind": self.kind, **{k: getattr(self, k) for k in keys}}


def stream_key(*parts) -> int:
    """128-bit Philox key from integers/strings, stable across platforms."""
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def link_rng(key: int, iteration: int) -> np.random.Generator:
    """Fresh generator for one link at one iteration."""
    return np.random.Generator(np.random.Philox(key=key, counter=iteration << 64))


def apply_gaussian(values, sigma, rng) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if not sigma >= 0:
        raise CommsError("sigma must be non-negative")
    if sigma == 0:
        return values
    return values + sigma * rng.standard_normal(values.shape[0])


def apply_bad_data(values, R, p_bad, rng, per_message=False) -> np.ndarray:
    """Add ``2 R (U1 - 0.5)`` to each element whose draw ``U2 < p_bad``."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    u2 = rng.random(1 if per_message else n)
    u1 = rng.random(n)
    hit = np.broadcast_to(u2 < p_bad, (n,))
    if not hit.any():
        return values
    return np.where(hit, values + 2.0 * R * (u1 - 0.5), values)


@dataclass
class _LossState:
    s: int = 1
    stepped_at: int = -1


@dataclass
class LinkState:
    sender: int
    receiver: int
    key: int
    last_good: np.ndarray
    loss: _LossState = field(default_factory=_LossState)
    loss_key: int | None = None

    @property
    def s(self) -> int:
        return self.loss.s


def step_loss_channel(state, lambda_f, lambda_r, rng):
    """Advance a two-state success/fail chain by one uniform draw.

    ``state`` is a :class:`LinkState` (or anything with an ``s`` field on
    ``.loss``); it is updated in place and returned.
    """
    for v in (lambda_f, lambda_r):
        if not 0.0 <= v <= 1.0:
            raise CommsError("transition probabilities must lie in [0, 1]")
    cell = state.loss if hasattr(state, "loss") else state
    u = rng.random()
    if cell.s == 1:
        cell.s = 0 if u < lambda_f else 1
    else:
        cell.s = 1 if u < lambda_r else 0
    return state


def transmit(link: LinkState, values, model: ChannelModel, iteration: int) -> np.ndarray:
    """Deliver ``values`` over ``link`` at ``iteration`` under ``model``."""
    if link is None or link.last_good is None:
        raise CommsError("link is not initialized")
    values = np.asarray(values, dtype=float)
    kind = model.kind
    if kind == "ideal":
        return values
    if kind == "gaussian":
        if model.sigma_noise == 0:
            return values
        return apply_gaussian(values, model.sigma_noise, link_rng(link.key, iteration))
    if kind == "bad_data":
        return apply_bad_data(values, model.R, model.p_bad, link_rng(link.key, iteration),
                              model.bad_data_per_message)
    # intermittent loss; a shared (symmetric) chain is stepped once per iteration
    cell = link.loss
    if cell.stepped_at != iteration:
        key = link.key if link.loss_key is None else link.loss_key
        step_loss_channel(cell, model.lambda_f, model.lambda_r, link_rng(key, iteration))
        cell.stepped_at = iteration
    if cell.s == 1:
        link.last_good = values.copy()
        return values
    return link.last_good.copy()


def make_links(link_buses, seed: int, init_payloads, models) -> dict:
    """Create a :class:`LinkState` for every directed link.

    ``link_buses`` maps ``(sender, receiver)`` to the buses carried;
    ``init_payloads`` gives each link's k = 0 payload; ``models`` maps each
    link to its :class:`ChannelModel`.
    """
    links = {}
    cells = {}
    for (a, b) in link_buses:
        m = models[(a, b)]
        cell, lkey = _LossState(), None
        if m.kind == "intermittent_loss" and m.symmetric_loss:
            pair = (min(a, b), max(a, b))
            cell = cells.setdefault(pair, cell)
            lkey = stream_key(seed, "loss", *pair)
        links[(a, b)] = LinkState(a, b, stream_key(seed, a, b),
                                  np.array(init_payloads[(a, b)], dtype=float), cell, lkey)
    return links
