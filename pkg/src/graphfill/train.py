"""Training loop, evaluation, and the two reference baselines.

Training follows a count-based epoch: every epoch draws batches_per_epoch
minibatches of batch_size window offsets uniformly with replacement from
the training split, hides a random fraction of each window's valid
entries (self-supervision), and minimizes the layer-wise loss — the sum
over layers of the mean absolute error of that layer's readout on the
hidden entries. Validation uses the same hiding mechanism with a fixed
seed so that every epoch scores the exact same validation task; early
stopping tracks strict improvements of validation MAE.

Everything here works on normalized values; `evaluate` converts back to
data units before reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import (Dataset, SpatioTemporalWindow, mae, make_windows,
                   split_slices, training_whiten)
from .errors import (DivergenceError, EmptySetError, MetricError,
                     NonFiniteError, ValidationError)
from .graph import SensorGraph, khop_subgraph
from .optim import AdamState, adam_step, clip_global_norm, lr_schedule
from .spin import SpinParameters, spin_forward, spin_forward_batch
from .spin_h import SpinHParameters, spinh_forward

GRAD_CLIP_NORM = 5.0


@dataclass
class TrainConfig:
    epochs_max: int = 300
    batches_per_epoch: int = 300
    batch_size: int = 8
    patience: int = 40
    lr: float = 0.0008
    warmup_steps: int = 12
    restart_period: int = 100
    seed: int = 0
    width: int = 24
    stride: int = 24
    split: tuple = (0.7, 0.1, 0.2)
    subsample: dict = None  # optional {"n_seeds": ..., "k_hops": ...}

    def validate(self):
        counts = {"epochs_max": self.epochs_max,
                  "batches_per_epoch": self.batches_per_epoch,
                  "batch_size": self.batch_size, "patience": self.patience,
                  "warmup_steps": self.warmup_steps,
                  "restart_period": self.restart_period, "width": self.width,
                  "stride": self.stride}
        for name, v in counts.items():
            if v < 1:
                raise ValidationError(f"{name} must be positive, got {v}")
        if self.patience > self.epochs_max:
            raise ValidationError(
                f"patience {self.patience} exceeds epochs_max {self.epochs_max}")
        if self.lr < 0:
            raise ValidationError(f"learning rate must be >= 0, got {self.lr}")
        if self.subsample is not None:
            if self.subsample.get("n_seeds", 0) < 1:
                raise ValidationError("subsample.n_seeds must be positive")
            if self.subsample.get("k_hops", -1) < 0:
                raise ValidationError("subsample.k_hops must be >= 0")
        return self


def forward_fn(params):
    """The single-window forward matching a parameter object's variant."""
    if isinstance(params, SpinParameters):
        return spin_forward
    if isinstance(params, SpinHParameters):
        return spinh_forward
    raise ValidationError(f"unknown parameter object {type(params).__name__}")


def spin_loss(output, truth, loss_mask) -> T.Value:
    """Layer-wise training loss for one window.

    Sum over layers of mean |prediction - truth| over loss_mask=1
    positions. Gradients flow into every layer's readout, supervising the
    representations at each depth.
    """
    loss_mask = np.asarray(loss_mask)
    pos = np.flatnonzero(loss_mask.ravel() == 1)
    if len(pos) == 0:
        raise EmptySetError("loss mask selects no positions")
    truth_rows = T.Value(np.asarray(truth, dtype=np.float64).reshape(-1, 1)[pos])
    acc = None
    for readout in output.readouts:
        flat = T.reshape(readout, (-1, 1))
        diff = T.sub(T.gather_rows(flat, pos, unique=True), truth_rows)
        term = T.vmean(T.vabs(diff))
        acc = term if acc is None else T.add(acc, term)
    return acc


def _batch_loss_stacked(batch_out, windows, loss_masks) -> T.Value:
    """Mean over windows of the layer-wise loss, on a stacked forward."""
    w, n = batch_out.window_shape
    stacked_mask = np.concatenate([m.ravel() for m in loss_masks])
    stacked_truth = np.concatenate(
        [np.asarray(win.values, dtype=np.float64).ravel() for win in windows])
    pos = np.flatnonzero(stacked_mask == 1)
    if len(pos) == 0:
        raise EmptySetError("loss masks select no positions")
    counts = np.array([int(m.sum()) for m in loss_masks], dtype=np.float64)
    if np.any(counts == 0):
        raise EmptySetError("a window's loss mask selects no positions")
    window_of = pos // (w * n)
    starts = np.searchsorted(window_of, np.arange(len(windows)))
    truth_rows = T.Value(stacked_truth[pos].reshape(-1, 1))
    counts_col = T.Value(counts.reshape(-1, 1))
    acc = None
    for readout in batch_out.readouts_flat:
        diff = T.sub(T.gather_rows(readout, pos, unique=True), truth_rows)
        per_window = T.div(T.segment_sum(T.vabs(diff), starts), counts_col)
        acc = per_window if acc is None else T.add(acc, per_window)
    return T.vmean(acc)


def _val_input_and_loss_masks(windows, seed):
    """Per-window whiten masks that are identical every time (fixed seed)."""
    masks = []
    for k, win in enumerate(windows):
        rng = np.random.default_rng(100003 * (seed + 1) + k)
        try:
            masks.append(training_whiten(win, rng=rng))
        except ValidationError:
            masks.append(None)  # window has no valid entries; skip in scoring
    return masks


def _column_subset_window(win, cols):
    return SpatioTemporalWindow(values=win.values[:, cols],
                                mask=win.mask[:, cols],
                                eval_mask=win.eval_mask[:, cols],
                                step_offsets=win.step_offsets)


def train(dataset: Dataset, graph: SensorGraph, config: TrainConfig, params,
          progress=None):
    """Fit `params` in place; returns (params, history, best_val_mae).

    dataset must already be normalized. history is a list of per-epoch
    dicts with keys epoch, train_loss, val_mae, lr.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    train_sl, val_sl, _ = split_slices(dataset.n_steps, config.split)
    n_train_steps = train_sl.stop - train_sl.start
    if n_train_steps < config.width:
        raise ValidationError(
            f"training split has {n_train_steps} steps, need >= {config.width}")
    train_view = Dataset(values=dataset.values[train_sl],
                         mask=dataset.mask[train_sl],
                         eval_mask=dataset.eval_mask[train_sl],
                         timestamps=dataset.timestamps[train_sl],
                         stats=dataset.stats, columns=dataset.columns)
    val_view = Dataset(values=dataset.values[val_sl],
                       mask=dataset.mask[val_sl],
                       eval_mask=dataset.eval_mask[val_sl],
                       timestamps=dataset.timestamps[val_sl],
                       stats=dataset.stats, columns=dataset.columns)
    val_windows = make_windows(val_view, config.width, config.stride)
    val_masks = _val_input_and_loss_masks(val_windows, config.seed)
    if all(m is None for m in val_masks):
        raise ValidationError("validation split has no usable windows")

    param_list = params.parameters()
    adam = AdamState(param_list)
    fwd = forward_fn(params)
    use_stacked = isinstance(params, SpinParameters)
    max_offset = n_train_steps - config.width
    history = []
    best_val = np.inf
    best_state = [p.data.copy() for p in param_list]
    bad_epochs = 0
    step = 0

    for epoch in range(1, config.epochs_max + 1):
        epoch_losses = []
        lr = 0.0
        for _ in range(config.batches_per_epoch):
            offsets = rng.integers(0, max_offset + 1, size=config.batch_size)
            windows = []
            for off in offsets:
                sl = slice(off, off + config.width)
                windows.append(SpatioTemporalWindow(
                    values=train_view.values[sl],
                    mask=train_view.mask[sl],
                    eval_mask=train_view.eval_mask[sl],
                    step_offsets=train_view.timestamps[sl]))
            batch_graph, node_map, seed_mask = graph, None, None
            if config.subsample is not None:
                seeds = rng.choice(graph.n_nodes,
                                   size=min(config.subsample["n_seeds"],
                                            graph.n_nodes), replace=False)
                batch_graph, node_map, seed_mask = khop_subgraph(
                    graph, seeds, config.subsample["k_hops"])
                cols = np.array(sorted(node_map), dtype=np.intp)
                windows = [_column_subset_window(win, cols) for win in windows]

            pairs = []
            for win in windows:
                try:
                    input_mask, loss_mask = training_whiten(win, rng=rng)
                except ValidationError:
                    continue  # nothing observed in this window; skip it
                if np.any(loss_mask & win.eval_mask):
                    raise ValidationError(
                        "whiten produced loss targets on evaluation entries")
                if seed_mask is not None:
                    loss_mask = loss_mask * seed_mask.astype(np.uint8)[None, :]
                    if not loss_mask.any():
                        continue
                pairs.append((win, input_mask, loss_mask))
            if not pairs:
                continue

            try:
                with T.Tape():
                    if use_stacked:
                        batch_out = spin_forward_batch(
                            [p[0] for p in pairs], batch_graph, params,
                            input_masks=[p[1] for p in pairs])
                        loss = _batch_loss_stacked(batch_out, [p[0] for p in pairs],
                                                   [p[2] for p in pairs])
                    else:
                        acc = None
                        for win, input_mask, loss_mask in pairs:
                            out = fwd(win, batch_graph, params,
                                      input_mask=input_mask)
                            term = spin_loss(out, win.values, loss_mask)
                            acc = term if acc is None else T.add(acc, term)
                        loss = T.div(acc, float(len(pairs)))
                    loss_value = float(loss.data)
                    grads_map = T.backward(loss)
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step}: {exc}") from exc
            if not np.isfinite(loss_value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step}")

            grads = [grads_map.get(p) for p in param_list]
            clip_global_norm(grads, GRAD_CLIP_NORM)
            lr = lr_schedule(step, epoch - 1, base_lr=config.lr,
                             warmup_steps=config.warmup_steps,
                             restart_period_epochs=config.restart_period)
            adam_step(param_list, grads, adam, lr)
            for p in param_list:
                p.zero_grad()
            step += 1
            epoch_losses.append(loss_value)

        val_mae = _validation_mae(val_windows, val_masks, graph, params)
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else np.nan
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_mae": val_mae, "lr": lr})
        if progress is not None:
            progress(history[-1])
        if val_mae < best_val:
            best_val = val_mae
            best_state = [p.data.copy() for p in param_list]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    for p, best in zip(param_list, best_state):
        p.data = best.copy()
    return params, history, best_val


def _validation_mae(val_windows, val_masks, graph, params):
    """MAE over the fixed hidden validation entries, in normalized units."""
    fwd = forward_fn(params)
    errors, count = 0.0, 0
    with T.no_grad():
        for win, masks in zip(val_windows, val_masks):
            if masks is None:
                continue
            input_mask, loss_mask = masks
            out = fwd(win, graph, params, input_mask=input_mask)
            sel = loss_mask == 1
            errors += float(np.abs(out.predictions[sel] - win.values[sel]).sum())
            count += int(sel.sum())
    if count == 0:
        raise MetricError("no validation targets available")
    return errors / count


def fit_node_means(dataset: Dataset, train_slice=None):
    """Per-node mean of valid training entries, plus the global fallback."""
    sl = train_slice if train_slice is not None else slice(None)
    values = dataset.values[sl]
    mask = dataset.mask[sl].astype(bool)
    if not mask.any():
        raise ValidationError("no valid entries to fit node means")
    global_mean = float(values[mask].mean())
    node_means = np.full(dataset.n_nodes, global_mean)
    for i in range(dataset.n_nodes):
        col = values[:, i][mask[:, i]]
        if len(col):
            node_means[i] = float(col.mean())
    return node_means, global_mean


def baseline_mean(window: SpatioTemporalWindow, node_means, global_mean=None):
    """Fill each missing entry with its node's training mean."""
    del global_mean  # node_means already carries the fallback
    filled = np.where(window.mask == 1, window.values,
                      np.asarray(node_means)[None, :])
    return filled


def baseline_knn(window: SpatioTemporalWindow, graph: SensorGraph, node_means):
    """Fill missing entries with the weighted mean of same-step neighbors.

    Weights are the incoming edge weights; entries with no valid neighbor
    at that step fall back to the node mean.
    """
    filled = np.array(window.values, dtype=np.float64, copy=True)
    mask = window.mask
    for i in range(window.n_nodes):
        missing = np.flatnonzero(mask[:, i] == 0)
        if len(missing) == 0:
            continue
        neighbors = graph.in_neighbors(i)
        if neighbors:
            js = np.array([j for j, _ in neighbors], dtype=np.intp)
            ws = np.array([wt for _, wt in neighbors])
            nb_mask = mask[:, js][missing] == 1  # (n_missing, n_neighbors)
            nb_vals = np.where(nb_mask, window.values[:, js][missing], 0.0)
            denom = nb_mask @ ws
            numer = nb_vals @ ws
            covered = denom > 0.0
            filled[missing, i] = np.where(covered,
                                          numer / np.maximum(denom, 1e-300),
                                          node_means[i])
        else:
            filled[missing, i] = node_means[i]
    return filled


def _test_windows(dataset: Dataset, width, stride, split):
    _, _, test_sl = split_slices(dataset.n_steps, split)
    test_view = Dataset(values=dataset.values[test_sl],
                        mask=dataset.mask[test_sl],
                        eval_mask=dataset.eval_mask[test_sl],
                        timestamps=dataset.timestamps[test_sl],
                        stats=dataset.stats, columns=dataset.columns)
    return make_windows(test_view, width, stride)


def _score_windows(windows, predict, stats, n_nodes):
    """Average per-window MAE of `predict(window)` on eval entries, data units."""
    per_window = []
    node_err = np.zeros(n_nodes)
    node_cnt = np.zeros(n_nodes, dtype=np.intp)
    n_eval = 0
    for win in windows:
        sel = win.eval_mask == 1
        if not sel.any():
            continue
        pred = stats.invert(predict(win))
        truth = stats.invert(win.values)
        err = np.abs(np.where(sel, pred - truth, 0.0))
        per_window.append(float(err[sel].mean()))
        n_eval += int(sel.sum())
        node_err += err.sum(axis=0)
        node_cnt += sel.sum(axis=0)
    if not per_window:
        raise MetricError("no evaluation targets in the test windows")
    per_node = [float(node_err[i] / node_cnt[i]) if node_cnt[i] else None
                for i in range(n_nodes)]
    return {"mae": float(np.mean(per_window)), "n_eval": int(n_eval),
            "per_window": per_window, "per_node": per_node}


def evaluate(params, dataset: Dataset, graph: SensorGraph, width, stride,
             split=(0.7, 0.1, 0.2)):
    """Model MAE on the test split's hidden entries, in data units."""
    windows = _test_windows(dataset, width, stride, split)
    fwd = forward_fn(params)

    def predict(win):
        with T.no_grad():
            return fwd(win, graph, params).predictions

    return _score_windows(windows, predict, dataset.stats, dataset.n_nodes)


def evaluate_baseline(kind, dataset: Dataset, graph: SensorGraph, width, stride,
                      split=(0.7, 0.1, 0.2)):
    """MAE of a reference baseline ("mean" or "knn") on the same protocol."""
    train_sl, _, _ = split_slices(dataset.n_steps, split)
    node_means, global_mean = fit_node_means(dataset, train_sl)
    windows = _test_windows(dataset, width, stride, split)
    if kind == "mean":
        predict = lambda win: baseline_mean(win, node_means, global_mean)
    elif kind == "knn":
        predict = lambda win: baseline_knn(win, graph, node_means)
    else:
        raise ValidationError(f"unknown baseline {kind!r}")
    return _score_windows(windows, predict, dataset.stats, dataset.n_nodes)
