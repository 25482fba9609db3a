"""Sequential SplitFed training over per-client noisy links.

Within a global epoch the server trains with clients 1..N in turn. Each
client starts from the model it last received (W^C, possibly noisy) and the
server from the previous averaged W^S; after its local epochs the best
epoch (lowest validation loss) is kept, per-sample losses give the
unreliability indicator, and W^C plus the indicator go uplink. The server
then averages and broadcasts the new W^C down every client's link.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as ds
from .aggregation import DEFAULT_ALPHA, STRATEGIES, AggregationError, aggregate, unreliability_indicator
from .autograd import NonFiniteError, Tensor, backward, dice_loss
from .channel import DEFAULT_ONSETS, ChannelState, Link, build_channels
from .metrics import MetricsRow, iou_per_class, pixel_accuracy
from .model import (
    AdamState,
    ArchConfig,
    ConfigError,
    IdentityLink,
    Params,
    SplitModelWeights,
    adam_step,
    as_leaves,
    build_split_unet,
    forward_back,
    forward_front,
    forward_monolithic,
    forward_server,
    leaf_grads,
    one_hot,
    per_sample_losses,
    predict_labels,
)

log = logging.getLogger(__name__)

FULL_COUNTS = (210, 120, 85, 180, 120)
DESK_COUNTS = tuple(c // 5 for c in FULL_COUNTS)  # (42, 24, 17, 36, 24)


@dataclass
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    sample_counts: tuple = DESK_COUNTS
    test_samples: int = 20
    local_epochs: int = 12
    global_epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-3
    strategy: str = "smart"
    alpha: float = DEFAULT_ALPHA
    sigma_noise: float = 0.0
    noise_onsets: dict = field(default_factory=lambda: dict(DEFAULT_ONSETS))
    sigma_overrides: dict = field(default_factory=dict)
    model_seed: int = 0
    data_seed: int = 0
    channel_seed: int = 0
    augment: bool = True
    server_lineage: str = "common"

    @property
    def num_clients(self) -> int:
        return len(self.sample_counts)

    def validate(self) -> "RunConfig":
        self.arch.validate()
        if self.num_clients < 1:
            raise ConfigError("data.sample_counts: need at least one client")
        if any(int(c) < 2 for c in self.sample_counts):
            raise ConfigError("data.sample_counts: every client needs >= 2 samples")
        for name in ("local_epochs", "global_epochs", "batch_size", "test_samples"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"protocol.{name}: must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy.name: {self.strategy!r} not in {STRATEGIES}")
        if not (self.learning_rate > 0):
            raise ConfigError("protocol.learning_rate: must be > 0")
        if not (self.sigma_noise >= 0) or not math.isfinite(self.sigma_noise):
            raise ConfigError("channel.sigma_noise: must be finite and >= 0")
        if self.server_lineage not in ("common", "carryover"):
            raise ConfigError("protocol.server_lineage: expected 'common' or 'carryover'")
        for cid in list(self.noise_onsets) + list(self.sigma_overrides):
            if not 1 <= int(cid) <= self.num_clients:
                raise ConfigError(f"channel.clients: client id {cid} outside 1..{self.num_clients}")
        return self


@dataclass
class ClientReport:
    client_id: int
    client_weights: Params          # W^C_i as received by the server
    server_weights: Params          # W^S_i, never transmitted
    per_sample_losses: np.ndarray
    indicator_sent: float
    indicator: float                # b_i as received by the server
    best_local_epoch: int           # 1-based; 0 when every epoch failed
    best_val_loss: float
    val_losses: list
    train_losses: list

    @property
    def diverged(self) -> bool:
        return self.best_local_epoch == 0


@dataclass
class EpochRecord:
    global_epoch: int
    reports: list
    weights_used: np.ndarray
    test_loss: float
    test_accuracy: float
    test_iou: np.ndarray
    diverged: bool


@dataclass
class SimulationState:
    cfg: RunConfig
    clients: list
    channels: list
    global_model: SplitModelWeights
    client_views: list              # W^C currently held by each client
    test_images: np.ndarray
    test_masks: np.ndarray
    reference: bool = False
    diverged: bool = False
    predictions: Optional[np.ndarray] = None


@dataclass
class SimulationResult:
    cfg: RunConfig
    history: list
    rows: list
    final_model: SplitModelWeights
    predictions: np.ndarray
    test_masks: np.ndarray
    diverged: bool

    @property
    def background_fraction(self) -> float:
        return ds.background_fraction(self.test_masks)


# ---------------------------------------------------------------- training

def split_gradients(w: SplitModelWeights, x: np.ndarray, target: np.ndarray, link) -> tuple[float, dict, dict]:
    """Forward FE -> server -> BE and back, every hop through ``link``.

    Returns the batch loss and the client (FE+BE) and server gradients.
    """
    fe, server, be = w.parts()
    fe_l, sv_l, be_l = as_leaves(fe), as_leaves(server), as_leaves(be)
    f = forward_front(fe, Tensor(x), training=True, leaves=fe_l)
    f_rx = Tensor(link.up("features", f.data), requires_grad=True)
    s = forward_server(server, f_rx, training=True, leaves=sv_l)
    s_rx = Tensor(link.down("features", s.data), requires_grad=True)
    probs, _ = forward_back(be, s_rx, leaves=be_l, predict=False)
    loss = dice_loss(probs, target)
    if not math.isfinite(loss.item()):
        raise NonFiniteError("training loss is not finite")
    backward(loss)
    backward(s, link.up("gradients", s_rx.grad))
    backward(f, link.down("gradients", f_rx.grad))
    return loss.item(), {**leaf_grads(fe_l), **leaf_grads(be_l)}, leaf_grads(sv_l)


def monolithic_gradients(w: SplitModelWeights, x: np.ndarray, target: np.ndarray) -> tuple[float, dict, dict]:
    """Same layer sequence as one graph, no link anywhere."""
    fe, server, be = w.parts()
    leaves = {"front_end": as_leaves(fe), "server": as_leaves(server), "back_end": as_leaves(be)}
    loss = dice_loss(forward_monolithic(w, Tensor(x), training=True, leaves=leaves), target)
    if not math.isfinite(loss.item()):
        raise NonFiniteError("training loss is not finite")
    backward(loss)
    client = {**leaf_grads(leaves["front_end"]), **leaf_grads(leaves["back_end"])}
    return loss.item(), client, leaf_grads(leaves["server"])


def _apply(w: SplitModelWeights, client_grads: dict, server_grads: dict,
           opt_client: AdamState, opt_server: AdamState) -> None:
    # validate both sides before updating either
    for grads in (client_grads, server_grads):
        for name, g in grads.items():
            if g is not None and not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    adam_step({**w.front_end, **w.back_end}, client_grads, opt_client)
    adam_step(w.server, server_grads, opt_server)


def select_best_epoch(val_losses) -> int:
    """1-based index of the lowest finite validation loss (earliest on ties); 0 if none."""
    best, best_val = 0, math.inf
    for i, v in enumerate(val_losses, start=1):
        if math.isfinite(v) and v < best_val:
            best, best_val = i, v
    return best


def run_local_training(client_id: int, client: ds.ClientData, received_client: Params,
                       server_start: Params, channel: Optional[ChannelState], global_epoch: int,
                       cfg: RunConfig, reference: bool = False) -> ClientReport:
    """Local epochs of one client with the server; every payload crosses the link.

    ``reference=True`` trains one unsplit graph with no channel at all; it is
    the baseline the split path must reproduce exactly on clean links.
    """
    template = build_template(cfg.arch)
    start = SplitModelWeights({k: received_client[k].copy() for k in template.front_end},
                              {k: v.copy() for k, v in server_start.items()},
                              {k: received_client[k].copy() for k in template.back_end})
    w = start.copy()
    link = IdentityLink() if (reference or channel is None) else Link(channel, global_epoch)
    opt_client = AdamState(lr=cfg.learning_rate)
    opt_server = AdamState(lr=cfg.learning_rate)
    num_classes = cfg.arch.num_classes
    val_x, val_m = ds.stack(client.val)
    n_train = len(client.train)

    train_losses, val_losses = [], []
    best_snapshot, best_val = None, math.inf
    for local_epoch in range(1, cfg.local_epochs + 1):
        rng = np.random.default_rng([cfg.data_seed, 0xB47C, global_epoch, client_id, local_epoch])
        order = rng.permutation(n_train)
        batch_losses, failed = [], False
        for lo in range(0, n_train, cfg.batch_size):
            batch = [client.train[i] for i in order[lo:lo + cfg.batch_size]]
            if cfg.augment:
                batch = [ds.augment(s, rng) for s in batch]
            x, m = ds.stack(batch)
            target = one_hot(m, num_classes)
            try:
                with np.errstate(all="ignore"):
                    if reference:
                        loss, cg, sg = monolithic_gradients(w, x, target)
                    else:
                        loss, cg, sg = split_gradients(w, x, target, link)
                    _apply(w, cg, sg, opt_client, opt_server)
                batch_losses.append(loss)
            except NonFiniteError as exc:
                log.debug("client %d, global %d, local %d: %s", client_id, global_epoch, local_epoch, exc)
                failed = True
                break
        if failed:
            train_losses.append(math.nan)
            val_losses.append(math.nan)
            continue
        train_losses.append(float(np.mean(batch_losses)))
        val = float(np.mean(per_sample_losses(w, val_x, val_m, link)))
        val_losses.append(val)
        if math.isfinite(val) and val < best_val:
            best_val, best_snapshot = val, w.copy()

    best_epoch = select_best_epoch(val_losses)
    if best_snapshot is None:
        chosen = start
        losses = np.full(n_train, math.nan)
        b_sent = math.inf
    else:
        chosen = best_snapshot
        train_x, train_m = ds.stack(client.train)
        losses = per_sample_losses(chosen, train_x, train_m, link)
        with np.errstate(invalid="ignore"):
            b_sent = unreliability_indicator(losses)
    sent_client = link.up("client_weights", chosen.client())
    b_received = link.up("scalar_indicator", b_sent)
    return ClientReport(client_id=client_id, client_weights=sent_client,
                        server_weights=chosen.server, per_sample_losses=losses,
                        indicator_sent=b_sent, indicator=float(b_received),
                        best_local_epoch=best_epoch, best_val_loss=best_val if best_snapshot else math.nan,
                        val_losses=val_losses, train_losses=train_losses)


_TEMPLATES: dict = {}


def build_template(arch: ArchConfig) -> SplitModelWeights:
    if arch not in _TEMPLATES:
        _TEMPLATES[arch] = build_split_unet(arch, seed=0)
    return _TEMPLATES[arch]


# ---------------------------------------------------------------- lifecycle

def init_state(cfg: RunConfig, reference: bool = False) -> SimulationState:
    cfg.validate()
    size = cfg.arch.input_size
    pool = ds.generate_dataset(cfg.data_seed, sum(cfg.sample_counts), size, ds.TRAIN_STREAM)
    clients = ds.partition(pool, cfg.sample_counts, cfg.data_seed)
    test = ds.generate_dataset(cfg.data_seed, cfg.test_samples, size, ds.TEST_STREAM)
    test_x, test_m = ds.stack(test)
    model = build_split_unet(cfg.arch, cfg.model_seed)
    channels = build_channels(cfg.num_clients, cfg.sigma_noise, cfg.channel_seed,
                              {int(k): v for k, v in cfg.noise_onsets.items()},
                              {int(k): v for k, v in cfg.sigma_overrides.items()})
    # the initial model is distributed before deployment, without channel noise
    views = [{k: v.copy() for k, v in model.client().items()} for _ in clients]
    return SimulationState(cfg=cfg, clients=clients, channels=channels, global_model=model,
                           client_views=views, test_images=test_x, test_masks=test_m, reference=reference)


def evaluate_global(model: SplitModelWeights, images: np.ndarray, masks: np.ndarray,
                    num_classes: int) -> tuple[float, np.ndarray]:
    """Clean (channel-free) test evaluation: mean per-sample Dice loss and label maps."""
    try:
        with np.errstate(all="ignore"):
            probs = forward_monolithic(model, Tensor(images), training=False).data
        losses = per_sample_losses(model, images, masks)
        loss = float(np.mean(losses))
        pred = predict_labels(probs)
    except NonFiniteError:
        loss, pred = math.nan, np.zeros_like(masks)
    return loss, pred


def _collapsed(masks: np.ndarray) -> np.ndarray:
    return np.zeros_like(masks)


def run_global_epoch(state: SimulationState, global_epoch: int) -> tuple[EpochRecord, list]:
    cfg = state.cfg
    n = cfg.num_clients
    if state.diverged:
        return _diverged_epoch(state, global_epoch, reports=[])

    reports, server_start = [], state.global_model.server
    for idx, client in enumerate(state.clients):
        channel = None if state.reference else state.channels[idx]
        rep = run_local_training(idx + 1, client, state.client_views[idx], server_start,
                                 channel, global_epoch, cfg, reference=state.reference)
        reports.append(rep)
        if cfg.server_lineage == "carryover":
            server_start = rep.server_weights
        log.info("epoch %d client %d: best local %d, val %.4f, b %.4f", global_epoch, idx + 1,
                 rep.best_local_epoch, rep.best_val_loss, rep.indicator)

    template = build_template(cfg.arch)
    snapshots = [SplitModelWeights({k: r.client_weights[k] for k in template.front_end}, r.server_weights,
                                   {k: r.client_weights[k] for k in template.back_end}) for r in reports]
    counts = [c.count for c in state.clients]
    try:
        with np.errstate(all="ignore"):
            new_model, weights_used = aggregate(cfg.strategy, snapshots, counts,
                                                [r.indicator for r in reports], cfg.alpha)
    except AggregationError as exc:
        log.warning("epoch %d: aggregation failed (%s); run diverged", global_epoch, exc)
        state.diverged = True
        return _diverged_epoch(state, global_epoch, reports)

    state.global_model = new_model
    for idx, ch in enumerate(state.channels):
        link = IdentityLink() if state.reference else Link(ch, global_epoch)
        state.client_views[idx] = link.down("global_client_weights", new_model.client())

    loss, pred = evaluate_global(new_model, state.test_images, state.test_masks, cfg.arch.num_classes)
    if not math.isfinite(loss) or not new_model.is_finite():
        log.warning("epoch %d: global model diverged", global_epoch)
        state.diverged = True
        return _diverged_epoch(state, global_epoch, reports, weights_used)
    state.predictions = pred
    record = EpochRecord(global_epoch, reports, weights_used, loss, pixel_accuracy(pred, state.test_masks),
                         iou_per_class(pred, state.test_masks, cfg.arch.num_classes), diverged=False)
    return record, _rows(cfg, record, n)


def _diverged_epoch(state: SimulationState, global_epoch: int, reports: list,
                    weights_used: Optional[np.ndarray] = None) -> tuple[EpochRecord, list]:
    """Divergence is sticky: the model collapses to predicting background everywhere."""
    cfg = state.cfg
    pred = _collapsed(state.test_masks)
    state.predictions = pred
    if weights_used is None:
        weights_used = np.full(cfg.num_clients, math.nan)
    record = EpochRecord(global_epoch, reports, weights_used, math.nan, pixel_accuracy(pred, state.test_masks),
                         iou_per_class(pred, state.test_masks, cfg.arch.num_classes), diverged=True)
    return record, _rows(cfg, record, cfg.num_clients)


def _rows(cfg: RunConfig, rec: EpochRecord, n: int) -> list:
    rows = []
    by_id = {r.client_id: r for r in rec.reports}
    for cid in range(1, n + 1):
        rep = by_id.get(cid)
        row = MetricsRow(rec.global_epoch, cid, cfg.strategy, cfg.sigma_noise,
                         r_weight=float(rec.weights_used[cid - 1]), diverged=rec.diverged)
        if rep is not None:
            with np.errstate(invalid="ignore"):
                row.train_loss = float(np.mean(rep.per_sample_losses))
            row.val_loss = rep.best_val_loss
            row.indicator = rep.indicator
            row.best_local_epoch = rep.best_local_epoch
        if rec.diverged:
            row.train_loss = row.val_loss = math.nan
        rows.append(row)
    rows.append(MetricsRow(rec.global_epoch, "global", cfg.strategy, cfg.sigma_noise,
                           test_loss=rec.test_loss, test_accuracy_percent=rec.test_accuracy,
                           iou=[float(v) for v in rec.test_iou], diverged=rec.diverged))
    return rows


def run_simulation(cfg: RunConfig, reference: bool = False) -> SimulationResult:
    state = init_state(cfg, reference=reference)
    history, rows = [], []
    for ge in range(1, cfg.global_epochs + 1):
        record, epoch_rows = run_global_epoch(state, ge)
        history.append(record)
        rows.extend(epoch_rows)
        log.info("global epoch %d: test loss %s, acc %.2f", ge, record.test_loss, record.test_accuracy)
    return SimulationResult(cfg=cfg, history=history, rows=rows, final_model=state.global_model,
                            predictions=state.predictions, test_masks=state.test_masks,
                            diverged=state.diverged)
