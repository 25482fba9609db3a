"""AWGN links between each client and the server.

Every client owns two independent Gaussian substreams, one per direction.
Each stream is a Philox-4x64 counter-based generator (numpy's
implementation) keyed from ``(master seed, client id, direction)``; its
53-bit uniforms are turned into normals with the Box-Muller transform, so
the draw sequence is fully determined by the key and the draw index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

UPLINK, DOWNLINK = "uplink", "downlink"
DIRECTIONS = (UPLINK, DOWNLINK)

# payload kind -> allowed directions
PAYLOAD_KINDS = {
    "features": DIRECTIONS,
    "gradients": DIRECTIONS,
    "client_weights": (UPLINK,),
    "scalar_indicator": (UPLINK,),
    "global_client_weights": (DOWNLINK,),
}

# the three noisy clients of the reference experiment and their onset epochs
DEFAULT_ONSETS = {3: 5, 4: 4, 5: 3}


class GaussianStream:
    """Sequential N(0, 1) draws: Philox uniforms through Box-Muller.

    Normals are produced in pairs ``(r cos t, r sin t)``; an odd request keeps
    the unused sine half for the next call, so the sequence does not depend
    on how requests are chunked.
    """

    def __init__(self, seed: int, client: int, direction: str):
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        key = np.random.SeedSequence([seed, client, DIRECTIONS.index(direction)]).generate_state(2, np.uint64)
        self._bits = np.random.Generator(np.random.Philox(key=key))
        self._spare: list[float] = []
        self.drawn = 0

    def normal(self, n: int) -> np.ndarray:
        out = np.empty(n)
        take = min(len(self._spare), n)
        out[:take] = self._spare[:take]
        del self._spare[:take]
        rest = n - take
        if rest:
            pairs = (rest + 1) // 2
            u = self._bits.random(2 * pairs)
            radius = np.sqrt(-2.0 * np.log1p(-u[0::2]))  # 1 - u in (0, 1]
            theta = 2.0 * np.pi * u[1::2]
            z = np.empty(2 * pairs)
            z[0::2] = radius * np.cos(theta)
            z[1::2] = radius * np.sin(theta)
            out[take:] = z[:rest]
            if rest % 2:
                self._spare.append(float(z[-1]))
        self.drawn += n
        return out


def gaussian_stream(seed: int, client: int, direction: str) -> GaussianStream:
    return GaussianStream(seed, client, direction)


@dataclass
class Payload:
    kind: str
    body: Union[np.ndarray, float, dict]
    direction: str = ""

    def __post_init__(self):
        allowed = PAYLOAD_KINDS.get(self.kind)
        if allowed is None:
            raise ValueError(f"unknown payload kind {self.kind!r}")
        if not self.direction:
            if len(allowed) != 1:
                raise ValueError(f"payload kind {self.kind!r} needs an explicit direction")
            self.direction = allowed[0]
        if self.direction not in allowed:
            raise ValueError(f"payload kind {self.kind!r} cannot travel {self.direction}")


@dataclass
class ChannelState:
    client_id: int
    sigma_noise: float = 0.0
    onset_global_epoch: float = math.inf
    seed: int = 0
    streams: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.sigma_noise < 0 or not math.isfinite(self.sigma_noise):
            raise ValueError(f"client {self.client_id}: sigma_noise must be finite and >= 0")

    def stream(self, direction: str) -> GaussianStream:
        if direction not in self.streams:
            self.streams[direction] = gaussian_stream(self.seed, self.client_id, direction)
        return self.streams[direction]


def noise_active(ch: ChannelState, global_epoch: int) -> bool:
    return math.isfinite(ch.onset_global_epoch) and global_epoch >= ch.onset_global_epoch


def _perturb(body, stream: GaussianStream, sigma: float):
    if isinstance(body, dict):
        return {k: _perturb(v, stream, sigma) for k, v in body.items()}
    if isinstance(body, np.ndarray):
        return body + sigma * stream.normal(body.size).reshape(body.shape)
    return float(body) + sigma * float(stream.normal(1)[0])


def _copy_body(body):
    if isinstance(body, dict):
        return {k: v.copy() for k, v in body.items()}
    if isinstance(body, np.ndarray):
        return body.copy()
    return body


def transmit(payload: Payload, ch: ChannelState, current_global_epoch: int) -> Payload:
    """Deliver ``payload`` over the client's link.

    Inactive or zero-sigma links return an exact copy. Otherwise every element
    (dict bodies: parameters in insertion order, each row-major) gets an
    independent N(0, sigma^2) draw from the direction's stream.
    """
    if ch.sigma_noise == 0.0 or not noise_active(ch, current_global_epoch):
        return Payload(payload.kind, _copy_body(payload.body), payload.direction)
    body = _perturb(payload.body, ch.stream(payload.direction), ch.sigma_noise)
    return Payload(payload.kind, body, payload.direction)


class Link:
    """A client's channel pinned to one global epoch, with a terse send API."""

    def __init__(self, ch: ChannelState, global_epoch: int):
        self.ch = ch
        self.global_epoch = global_epoch

    def up(self, kind: str, body):
        return transmit(Payload(kind, body, UPLINK), self.ch, self.global_epoch).body

    def down(self, kind: str, body):
        return transmit(Payload(kind, body, DOWNLINK), self.ch, self.global_epoch).body


def build_channels(num_clients: int, sigma_noise: float, seed: int,
                   onsets: dict | None = None, sigma_overrides: dict | None = None) -> list[ChannelState]:
    """One ChannelState per client (ids 1..N); clients absent from ``onsets`` are clean."""
    onsets = DEFAULT_ONSETS if onsets is None else onsets
    sigma_overrides = sigma_overrides or {}
    return [ChannelState(client_id=i, sigma_noise=float(sigma_overrides.get(i, sigma_noise)),
                         onset_global_epoch=onsets.get(i, math.inf), seed=seed)
            for i in range(1, num_clients + 1)]
