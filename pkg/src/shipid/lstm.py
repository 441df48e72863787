"""Stacked LSTM sequence regressor with exact through-time gradients.

Everything runs directly on numpy float64 arrays: gate math, backpropagation
through time, Adam, and Monte Carlo dropout.  The network is a stack of LSTM
layers (three in all experiments), each followed by a dropout layer, feeding
a linear head with one output per motion channel.

Per step and layer, with z = [h_prev, x]:

    f = sigmoid(W_f z + b_f)        forget gate
    i = sigmoid(W_i z + b_i)        input gate
    g = tanh(W_C z + b_C)           candidate cell
    C = f * C_prev + i * g
    o = sigmoid(W_o z + b_o)        output gate
    h = o * tanh(C)

The training loss for one sequence is the time-mean squared error summed
over the six output channels; batches average over runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetTensors, Standardizer

N_OUTPUTS = 6


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp may overflow to inf for very negative z; 1/(1+inf) is still the
    # correct limit 0, so only the warning needs suppressing.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


@dataclass
class LstmLayerParams:
    """Weights of one LSTM layer; each matrix is (units, units + input_dim)."""

    W_f: np.ndarray
    W_i: np.ndarray
    W_C: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_C: np.ndarray
    b_o: np.ndarray

    def __post_init__(self) -> None:
        for name in ("W_f", "W_i", "W_C", "W_o", "b_f", "b_i", "b_C", "b_o"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        shape = self.W_f.shape
        if len(shape) != 2 or shape[1] <= shape[0]:
            raise ValueError("weight matrices must be (units, units + input_dim)")
        for name in ("W_i", "W_C", "W_o"):
            if getattr(self, name).shape != shape:
                raise ValueError("all four gate matrices must share one shape")
        for name in ("b_f", "b_i", "b_C", "b_o"):
            if getattr(self, name).shape != (shape[0],):
                raise ValueError("biases must have shape (units,)")

    @property
    def units(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Gate matrices and biases stacked in f, i, g, o order."""
        w = np.vstack((self.W_f, self.W_i, self.W_C, self.W_o))
        b = np.concatenate((self.b_f, self.b_i, self.b_C, self.b_o))
        return w, b


@dataclass
class LstmModel:
    """The full regressor: LSTM stack, linear head, and data normalization."""

    layers: list
    W_out: np.ndarray
    b_out: np.ndarray
    dropout_rate: float
    input_standardizer: Standardizer
    output_standardizer: Standardizer
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.W_out = np.asarray(self.W_out, dtype=float)
        self.b_out = np.asarray(self.b_out, dtype=float)
        if len(self.layers) < 1:
            raise ValueError("at least one LSTM layer required")
        if self.layers[0].input_dim != self.input_standardizer.n_channels:
            raise ValueError("first layer width must match the probe count")
        for below, above in zip(self.layers[:-1], self.layers[1:]):
            if above.input_dim != below.units:
                raise ValueError("stacked layer dimensions do not chain")
        units = self.layers[-1].units
        if self.W_out.shape != (N_OUTPUTS, units) or self.b_out.shape != (N_OUTPUTS,):
            raise ValueError("head must map final units to 6 outputs")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def n_probes(self) -> int:
        return self.layers[0].input_dim

    @property
    def units(self) -> int:
        return self.layers[0].units


def init_model(
    seed: int,
    n_probes: int,
    units: int = 250,
    n_layers: int = 3,
    dropout_rate: float = 0.1,
    forget_bias: float = 1.0,
    input_standardizer: Standardizer | None = None,
    output_standardizer: Standardizer | None = None,
) -> LstmModel:
    """Seeded weight initialization: uniform +-1/sqrt(fan_in), zero biases.

    The forget-gate bias starts at ``forget_bias`` (default +1) so early
    training does not wash out the cell state; pass 0 to disable.
    """
    if n_probes < 1 or units < 1 or n_layers < 1:
        raise ValueError("n_probes, units, and n_layers must be positive")
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape)

    layers = []
    in_dim = n_probes
    for _ in range(n_layers):
        fan = units + in_dim
        layers.append(
            LstmLayerParams(
                W_f=uniform((units, fan), fan),
                W_i=uniform((units, fan), fan),
                W_C=uniform((units, fan), fan),
                W_o=uniform((units, fan), fan),
                b_f=np.full(units, float(forget_bias)),
                b_i=np.zeros(units),
                b_C=np.zeros(units),
                b_o=np.zeros(units),
            )
        )
        in_dim = units

    if input_standardizer is None:
        input_standardizer = Standardizer(np.zeros(n_probes), np.ones(n_probes))
    if output_standardizer is None:
        output_standardizer = Standardizer(np.zeros(N_OUTPUTS), np.ones(N_OUTPUTS))

    return LstmModel(
        layers=layers,
        W_out=uniform((N_OUTPUTS, units), units),
        b_out=np.zeros(N_OUTPUTS),
        dropout_rate=dropout_rate,
        input_standardizer=input_standardizer,
        output_standardizer=output_standardizer,
        meta={"init_seed": int(seed), "forget_bias": float(forget_bias)},
    )


def lstm_cell_forward(
    x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, params: LstmLayerParams
) -> tuple[np.ndarray, np.ndarray]:
    """One unbatched cell step; returns (h_t, C_t).

    Kept as a direct transcription of the gate equations so the fast batched
    path can be cross-checked against it.
    """
    z = np.concatenate((np.asarray(h_prev, dtype=float), np.asarray(x_t, dtype=float)))
    if z.shape != (params.units + params.input_dim,):
        raise ValueError("input/state widths do not match the layer")
    f = _sigmoid(params.W_f @ z + params.b_f)
    i = _sigmoid(params.W_i @ z + params.b_i)
    g = np.tanh(params.W_C @ z + params.b_C)
    c_t = f * np.asarray(c_prev, dtype=float) + i * g
    o = _sigmoid(params.W_o @ z + params.b_o)
    h_t = o * np.tanh(c_t)
    return h_t, c_t


def sample_masks(model: LstmModel, n_sequences: int, rng) -> list:
    """Inverted-dropout masks, one (B, units) array per layer.

    A mask is constant along the whole sequence (variational style), drawn
    independently per run and layer, and scaled by 1/keep so the expected
    activation is unchanged.
    """
    keep = 1.0 - model.dropout_rate
    masks = []
    for layer in model.layers:
        bern = rng.random((n_sequences, layer.units)) < keep
        masks.append(bern.astype(float) / keep)
    return masks


def sample_masks_per_step(model: LstmModel, n_sequences: int, n_steps: int, rng) -> list:
    """Per-step dropout variant: masks shaped (B, T, units), redrawn each step."""
    keep = 1.0 - model.dropout_rate
    masks = []
    for layer in model.layers:
        bern = rng.random((n_sequences, n_steps, layer.units)) < keep
        masks.append(bern.astype(float) / keep)
    return masks


class LstmCache:
    """Saved forward state for one batch, consumed by :func:`backward`."""

    def __init__(self, inputs, masks, per_layer, last_hidden_masked, outputs):
        self.inputs = inputs                  # (B, T, K)
        self.masks = masks                    # per layer, (B, U) or (B, T, U) or None
        self.per_layer = per_layer            # list of dicts of (B, T, U) arrays
        self.last_hidden_masked = last_hidden_masked  # (B, T, U)
        self.outputs = outputs                # (B, T, 6)


def _layer_forward(layer: LstmLayerParams, x: np.ndarray, mask):
    """Run one layer over (B, T, D) input; returns (output, backward cache).

    The input projection of every step is taken outside the recurrence, so
    the time loop only carries the hidden-state product and the gate math.
    """
    b_sz, t_len, _ = x.shape
    u = layer.units
    w_all, b_all = layer.stacked()
    w_h = np.ascontiguousarray(w_all[:, :u])
    w_x = np.ascontiguousarray(w_all[:, u:])
    pre_x = x @ w_x.T + b_all  # (B, T, 4U)
    hid = np.empty((b_sz, t_len, u))
    store = {name: np.empty((b_sz, t_len, u)) for name in ("f", "i", "g", "o", "c", "tc")}
    store["x"] = x
    h = np.zeros((b_sz, u))
    c = np.zeros((b_sz, u))
    for t in range(t_len):
        gates = h @ w_h.T + pre_x[:, t, :]
        f = _sigmoid(gates[:, :u])
        i = _sigmoid(gates[:, u : 2 * u])
        g = np.tanh(gates[:, 2 * u : 3 * u])
        o = _sigmoid(gates[:, 3 * u :])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        hid[:, t, :] = h
        store["f"][:, t, :] = f
        store["i"][:, t, :] = i
        store["g"][:, t, :] = g
        store["o"][:, t, :] = o
        store["c"][:, t, :] = c
        store["tc"][:, t, :] = tc
    store["h"] = hid
    if mask is None:
        out = hid
    elif mask.ndim == 2:
        out = hid * mask[:, None, :]
    else:
        out = hid * mask
    return out, store


def _forward_inference(model: LstmModel, sequences: np.ndarray, masks, dtype=np.float64):
    """Forward pass without gradient bookkeeping.

    Works time-major internally so every large matrix product runs on
    contiguous data, and reuses fixed scratch buffers inside the recurrence.
    ``dtype`` selects the arithmetic precision of this pass alone.
    """
    b_sz, t_len, _ = sequences.shape
    x = np.ascontiguousarray(sequences.transpose(1, 0, 2), dtype=dtype)  # (T, B, D)
    layer_masks = masks if masks is not None else [None] * len(model.layers)
    with np.errstate(over="ignore"):
        for layer, mask in zip(model.layers, layer_masks):
            u = layer.units
            w_all, b_all = layer.stacked()
            w_h_t = np.ascontiguousarray(w_all[:, :u].T, dtype=dtype)
            w_x_t = np.ascontiguousarray(w_all[:, u:].T, dtype=dtype)
            bias = b_all.astype(dtype)
            d = x.shape[2]
            pre = np.matmul(x.reshape(t_len * b_sz, d), w_x_t).reshape(t_len, b_sz, 4 * u)
            pre += bias
            hid = np.empty((t_len, b_sz, u), dtype=dtype)
            gates = np.empty((b_sz, 4 * u), dtype=dtype)
            h = np.zeros((b_sz, u), dtype=dtype)
            c = np.zeros((b_sz, u), dtype=dtype)
            tc = np.empty((b_sz, u), dtype=dtype)
            sig = gates[:, : 2 * u]
            g_part = gates[:, 2 * u : 3 * u]
            o_part = gates[:, 3 * u :]
            for t in range(t_len):
                np.matmul(h, w_h_t, out=gates)
                gates += pre[t]
                # f and i are adjacent, one sigmoid sweep covers both
                np.negative(sig, out=sig)
                np.exp(sig, out=sig)
                sig += 1.0
                np.reciprocal(sig, out=sig)
                np.negative(o_part, out=o_part)
                np.exp(o_part, out=o_part)
                o_part += 1.0
                np.reciprocal(o_part, out=o_part)
                np.tanh(g_part, out=g_part)
                f = gates[:, :u]
                i = gates[:, u : 2 * u]
                np.multiply(f, c, out=c)
                i *= g_part
                c += i
                np.tanh(c, out=tc)
                np.multiply(o_part, tc, out=h)
                hid[t] = h
            if mask is not None:
                if mask.ndim == 2:
                    hid *= mask.astype(dtype)
                else:
                    hid *= mask.transpose(1, 0, 2).astype(dtype)
            x = hid
    u = x.shape[2]
    head = np.matmul(x.reshape(t_len * b_sz, u), model.W_out.T.astype(dtype))
    head += model.b_out.astype(dtype)
    out = head.reshape(t_len, b_sz, 6).transpose(1, 0, 2)
    return np.ascontiguousarray(out)


def _forward_batch(model: LstmModel, sequences: np.ndarray, masks, keep_cache: bool):
    if not keep_cache:
        return _forward_inference(model, sequences, masks), None
    x = sequences
    per_layer = []
    layer_masks = masks if masks is not None else [None] * len(model.layers)
    for layer, mask in zip(model.layers, layer_masks):
        x, store = _layer_forward(layer, x, mask)
        per_layer.append(store)
    outputs = x @ model.W_out.T + model.b_out
    return outputs, LstmCache(sequences, layer_masks, per_layer, x, outputs)


def forward(model: LstmModel, sequence: np.ndarray, dropout_seed: int | None = None) -> np.ndarray:
    """Map a standardized probe sequence (T, K) to motion channels (T, 6).

    With ``dropout_seed`` None the dropout layers are inactive; an integer
    seed draws one set of per-sequence masks, which is how Monte Carlo
    samples are generated.  A batch (B, T, K) maps to (B, T, 6).
    """
    seq = np.asarray(sequence, dtype=float)
    single = seq.ndim == 2
    if single:
        seq = seq[None, :, :]
    if seq.ndim != 3 or seq.shape[2] != model.n_probes:
        raise ValueError(f"sequence must have {model.n_probes} probe channels")
    masks = None
    if dropout_seed is not None:
        rng = np.random.default_rng(dropout_seed)
        masks = sample_masks(model, seq.shape[0], rng)
    out, _ = _forward_batch(model, seq, masks, keep_cache=False)
    return out[0] if single else out


def forward_cached(model: LstmModel, sequences: np.ndarray, masks=None):
    """Batched forward that keeps everything backward needs; returns (out, cache)."""
    seq = np.asarray(sequences, dtype=float)
    if seq.ndim != 3 or seq.shape[2] != model.n_probes:
        raise ValueError(f"sequences must be (B, T, {model.n_probes})")
    return _forward_batch(model, seq, masks, keep_cache=True)


def sequence_loss(outputs: np.ndarray, targets: np.ndarray) -> float:
    """Time-mean squared error summed over channels, averaged over the batch."""
    out = np.asarray(outputs, dtype=float)
    tgt = np.asarray(targets, dtype=float)
    if out.shape != tgt.shape:
        raise ValueError("outputs and targets must have identical shape")
    if out.ndim == 2:
        out = out[None]
        tgt = tgt[None]
    t_len = out.shape[1]
    per_run = np.sum((out - tgt) ** 2, axis=(1, 2)) / t_len
    return float(per_run.mean())


def backward(model: LstmModel, cache: LstmCache, targets: np.ndarray):
    """Exact loss gradients via backpropagation through time.

    Returns ``(loss, grads)`` where ``grads`` lists, per layer, the arrays
    dW_f, dW_i, dW_C, dW_o, db_f, db_i, db_C, db_o, followed by dW_out and
    db_out; the order matches :func:`parameter_list`.
    """
    if not isinstance(cache, LstmCache):
        raise ValueError("backward needs the cache returned by forward_cached")
    tgt = np.asarray(targets, dtype=float)
    out = cache.outputs
    if tgt.shape != out.shape:
        raise ValueError("targets must match the cached output shape")
    b_sz, t_len, _ = out.shape

    diff = out - tgt
    loss = float(np.sum(diff**2) / t_len / b_sz)
    d_out = (2.0 / (t_len * b_sz)) * diff

    h_last = cache.last_hidden_masked
    d_w_head = np.einsum("btc,btu->cu", d_out, h_last)
    d_b_head = d_out.sum(axis=(0, 1))
    d_stream = d_out @ model.W_out  # gradient wrt masked hidden of top layer

    layer_grads = [None] * len(model.layers)
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        store = cache.per_layer[idx]
        mask = cache.masks[idx]
        u = layer.units
        w_all, _ = layer.stacked()

        if mask is None:
            d_hid = d_stream
        elif mask.ndim == 2:
            d_hid = d_stream * mask[:, None, :]
        else:
            d_hid = d_stream * mask

        w_h = np.ascontiguousarray(w_all[:, :u])
        w_x = np.ascontiguousarray(w_all[:, u:])
        d_gates_all = np.empty((b_sz, t_len, 4 * u))
        dh_next = np.zeros((b_sz, u))
        dc_next = np.zeros((b_sz, u))
        f_all, i_all, g_all, o_all = store["f"], store["i"], store["g"], store["o"]
        c_all, tc_all = store["c"], store["tc"]
        for t in range(t_len - 1, -1, -1):
            dh = d_hid[:, t, :] + dh_next
            o = o_all[:, t, :]
            tc = tc_all[:, t, :]
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            c_prev = c_all[:, t - 1, :] if t > 0 else 0.0
            f = f_all[:, t, :]
            i = i_all[:, t, :]
            g = g_all[:, t, :]
            dc_next = dc * f
            d_gates = d_gates_all[:, t, :]
            d_gates[:, :u] = dc * c_prev * f * (1.0 - f)
            d_gates[:, u : 2 * u] = dc * g * i * (1.0 - i)
            d_gates[:, 2 * u : 3 * u] = dc * i * (1.0 - g * g)
            d_gates[:, 3 * u :] = do * o * (1.0 - o)
            dh_next = d_gates @ w_h
        # Weight and input gradients fall out of single contractions once the
        # per-step pre-activation gradients are known.
        h_prev = np.zeros((b_sz, t_len, u))
        h_prev[:, 1:, :] = store["h"][:, :-1, :]
        d_wh = np.einsum("btg,btu->gu", d_gates_all, h_prev)
        d_wx = np.einsum("btg,btd->gd", d_gates_all, store["x"])
        d_w = np.concatenate((d_wh, d_wx), axis=1)
        d_b = d_gates_all.sum(axis=(0, 1))
        layer_grads[idx] = (
            d_w[:u],
            d_w[u : 2 * u],
            d_w[2 * u : 3 * u],
            d_w[3 * u :],
            d_b[:u],
            d_b[u : 2 * u],
            d_b[2 * u : 3 * u],
            d_b[3 * u :],
        )
        d_stream = d_gates_all @ w_x

    grads = []
    for g8 in layer_grads:
        grads.extend(g8)
    grads.append(d_w_head)
    grads.append(d_b_head)
    return loss, grads


def parameter_list(model: LstmModel) -> list:
    """Live parameter arrays in the documented order (layer gates, then head)."""
    params = []
    for layer in model.layers:
        params.extend(
            [layer.W_f, layer.W_i, layer.W_C, layer.W_o, layer.b_f, layer.b_i, layer.b_C, layer.b_o]
        )
    params.append(model.W_out)
    params.append(model.b_out)
    return params


@dataclass
class AdamState:
    """First and second moment accumulators plus the step counter."""

    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(
    params,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied to the arrays in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and moments must align")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + epsilon)


def clip_gradients(grads, max_norm: float | None) -> float:
    """Scale all gradients by a common factor if their global norm exceeds
    ``max_norm``; returns the pre-clip norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm is not None and total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"training loss became non-finite at epoch {epoch}")


@dataclass(frozen=True)
class TrainSettings:
    """Hyperparameters for :func:`train`."""

    units: int = 250
    n_layers: int = 3
    dropout_rate: float = 0.1
    learning_rate: float = 1e-5
    epochs: int = 2000
    batch_policy: str = "full"          # "full" or "per_run"
    grad_clip_norm: float | None = 10.0
    forget_bias: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    chunk_size: int = 64                # batch rows held in memory at once
    mask_per_step: bool = False

    def __post_init__(self) -> None:
        if self.batch_policy not in ("full", "per_run"):
            raise ValueError("batch_policy must be 'full' or 'per_run'")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")


def _epoch_masks(model: LstmModel, settings: TrainSettings, n_runs: int, n_steps: int, rng):
    if model.dropout_rate == 0.0:
        return None
    if settings.mask_per_step:
        return sample_masks_per_step(model, n_runs, n_steps, rng)
    return sample_masks(model, n_runs, rng)


def _slice_masks(masks, sel):
    if masks is None:
        return None
    return [m[sel] for m in masks]


def train(
    data: DatasetTensors,
    settings: TrainSettings,
    init_seed: int,
    loss_callback=None,
) -> tuple[LstmModel, list]:
    """Fit a model to standardized tensors; returns (model, loss history).

    Weight initialization is seeded by ``init_seed``; dropout masks come
    from an rng split off the same seed, so the whole run is reproducible.
    With the ``full`` batch policy every epoch takes one Adam step on the
    gradient averaged over all runs; ``per_run`` steps once per run.  The
    history records the loss of each epoch before its update.

    Raises :class:`TrainingDiverged` if the loss leaves the reals.
    """
    model = init_model(
        seed=init_seed,
        n_probes=data.n_probes,
        units=settings.units,
        n_layers=settings.n_layers,
        dropout_rate=settings.dropout_rate,
        forget_bias=settings.forget_bias,
        input_standardizer=data.input_standardizer,
        output_standardizer=data.output_standardizer,
    )
    model.meta["mode"] = data.mode
    params = parameter_list(model)
    adam = AdamState.for_params(params)
    mask_rng = np.random.default_rng(np.random.SeedSequence(entropy=init_seed, spawn_key=(1,)))

    x = data.inputs
    y = data.outputs
    m_runs = x.shape[0]
    history = []

    for epoch in range(1, settings.epochs + 1):
        masks = _epoch_masks(model, settings, m_runs, x.shape[1], mask_rng)
        if settings.batch_policy == "full":
            total_grads = [np.zeros_like(p) for p in params]
            total_loss = 0.0
            for start in range(0, m_runs, settings.chunk_size):
                sel = slice(start, min(start + settings.chunk_size, m_runs))
                weight = (sel.stop - sel.start) / m_runs
                _, cache = forward_cached(model, x[sel], _slice_masks(masks, sel))
                loss, grads = backward(model, cache, y[sel])
                total_loss += weight * loss
                for acc, g in zip(total_grads, grads):
                    acc += weight * g
            clip_gradients(total_grads, settings.grad_clip_norm)
            adam_step(params, total_grads, adam, settings.learning_rate, settings.beta1, settings.beta2, settings.epsilon)
            epoch_loss = total_loss
        else:
            losses = []
            for run in range(m_runs):
                sel = slice(run, run + 1)
                _, cache = forward_cached(model, x[sel], _slice_masks(masks, sel))
                loss, grads = backward(model, cache, y[sel])
                clip_gradients(grads, settings.grad_clip_norm)
                adam_step(params, grads, adam, settings.learning_rate, settings.beta1, settings.beta2, settings.epsilon)
                losses.append(loss)
            epoch_loss = float(np.mean(losses))
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(epoch)
        history.append(epoch_loss)
        if loss_callback is not None:
            loss_callback(epoch, epoch_loss)

    return model, history


@dataclass
class PredictionEnsemble:
    """Monte Carlo dropout samples and their per-step statistics.

    All arrays are in physical units.  ``band_halfwidth`` is exactly five
    population standard deviations, the uncertainty band the toolkit reports.
    """

    samples: np.ndarray     # (S, T, 6)
    mean: np.ndarray        # (T, 6)
    std: np.ndarray         # (T, 6)
    band_halfwidth: np.ndarray

    BAND_SIGMA = 5.0

    def __post_init__(self) -> None:
        if self.samples.ndim != 3 or self.samples.shape[0] < 1:
            raise ValueError("samples must be (S, T, 6) with S >= 1")

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "PredictionEnsemble":
        arr = np.asarray(samples, dtype=float)
        mean = arr.mean(axis=0)
        std = arr.std(axis=0)  # population
        return cls(samples=arr, mean=mean, std=std, band_halfwidth=cls.BAND_SIGMA * std)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]


def mc_predict(
    model: LstmModel,
    sequence: np.ndarray,
    n_samples: int = 100,
    seed: int = 0,
    single_precision: bool = True,
) -> PredictionEnsemble:
    """Stochastic forward passes with dropout left on; statistics over samples.

    Sample s draws its masks from an rng seeded by (seed, s), so any sample
    can be reproduced alone and the ensemble does not depend on evaluation
    order.  Outputs are de-standardized to physical units before statistics.

    The batched passes default to float32 arithmetic — the dispersion they
    measure is orders of magnitude above that resolution and it roughly
    halves the wall time; statistics are always taken in float64.  Pass
    ``single_precision=False`` to run the network in float64 throughout.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    seq = np.asarray(sequence, dtype=float)
    if seq.ndim != 2 or seq.shape[1] != model.n_probes:
        raise ValueError(f"sequence must be (T, {model.n_probes})")
    masks = None
    if model.dropout_rate > 0.0:
        per_sample = [
            sample_masks(model, 1, np.random.default_rng(np.random.SeedSequence([seed, s])))
            for s in range(n_samples)
        ]
        masks = [
            np.concatenate([per_sample[s][layer] for s in range(n_samples)], axis=0)
            for layer in range(len(model.layers))
        ]
    batch = np.ascontiguousarray(np.broadcast_to(seq, (n_samples,) + seq.shape))
    dtype = np.float32 if single_precision else np.float64
    raw = _forward_inference(model, batch, masks, dtype=dtype)
    physical = model.output_standardizer.invert(raw.astype(np.float64))
    return PredictionEnsemble.from_samples(physical)


def integrate_velocities(
    predictions: np.ndarray,
    mode: str,
    dt: float,
    initial_pose: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rebuild the earth-frame track (x, y, yaw) from predicted channels.

    ``predictions`` is (T, 6) in physical units with the standard channel
    order.  Course keeping takes yaw from channel 5 directly; the turning
    circle integrates yaw rate from the initial heading.  Velocities are
    rotated to the earth frame and integrated with the trapezoid rule.
    """
    from .vessel import COURSE_KEEPING, MODES, TURNING_CIRCLE

    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    pred = np.asarray(predictions, dtype=float)
    if pred.ndim != 2 or pred.shape[1] != N_OUTPUTS:
        raise ValueError("predictions must be (T, 6)")
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x0, y0, psi0 = initial_pose
    u = pred[:, 0]
    v = pred[:, 1]

    def cumtrap(series):
        out = np.zeros_like(series)
        out[1:] = np.cumsum(0.5 * (series[1:] + series[:-1]) * dt)
        return out

    if mode == COURSE_KEEPING:
        yaw = pred[:, 5]
    else:
        yaw = psi0 + cumtrap(pred[:, 5])
    vx = u * np.cos(yaw) - v * np.sin(yaw)
    vy = u * np.sin(yaw) + v * np.cos(yaw)
    return x0 + cumtrap(vx), y0 + cumtrap(vy), yaw


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: LstmModel, loss_history=None, extras: dict | None = None) -> None:
    """Write a self-contained model file (npz with a JSON header).

    ``extras`` may carry additional float arrays (for example the frozen
    encounter frame and probe offsets) so prediction needs nothing else.
    """
    arrays = {}
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "n_layers": len(model.layers),
        "units": [layer.units for layer in model.layers],
        "input_dims": [layer.input_dim for layer in model.layers],
        "dropout_rate": model.dropout_rate,
        "model_meta": model.meta,
        "extra_keys": sorted(extras.keys()) if extras else [],
    }
    for li, layer in enumerate(model.layers):
        for name in ("W_f", "W_i", "W_C", "W_o", "b_f", "b_i", "b_C", "b_o"):
            arrays[f"layer{li}_{name}"] = getattr(layer, name)
    arrays["W_out"] = model.W_out
    arrays["b_out"] = model.b_out
    arrays["input_mean"] = model.input_standardizer.mean
    arrays["input_std"] = model.input_standardizer.std
    arrays["output_mean"] = model.output_standardizer.mean
    arrays["output_std"] = model.output_standardizer.std
    if loss_history is not None:
        arrays["loss_history"] = np.asarray(loss_history, dtype=float)
    if extras:
        for key, value in extras.items():
            arrays[f"extra_{key}"] = np.asarray(value, dtype=float)
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_checkpoint(path):
    """Read a checkpoint; returns (model, loss_history, extras).

    Every tensor shape is validated against the header before the model is
    assembled.
    """
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('checkpoint_version')}")
        layers = []
        for li in range(meta["n_layers"]):
            u = meta["units"][li]
            d = meta["input_dims"][li]
            fields = {}
            for name in ("W_f", "W_i", "W_C", "W_o"):
                arr = data[f"layer{li}_{name}"]
                if arr.shape != (u, u + d):
                    raise ValueError(f"layer {li} {name} has shape {arr.shape}, expected {(u, u + d)}")
                fields[name] = arr
            for name in ("b_f", "b_i", "b_C", "b_o"):
                arr = data[f"layer{li}_{name}"]
                if arr.shape != (u,):
                    raise ValueError(f"layer {li} {name} has shape {arr.shape}, expected {(u,)}")
                fields[name] = arr
            layers.append(LstmLayerParams(**fields))
        w_out = data["W_out"]
        b_out = data["b_out"]
        top = meta["units"][-1]
        if w_out.shape != (N_OUTPUTS, top) or b_out.shape != (N_OUTPUTS,):
            raise ValueError("head tensor shapes do not match the header")
        model = LstmModel(
            layers=layers,
            W_out=w_out,
            b_out=b_out,
            dropout_rate=float(meta["dropout_rate"]),
            input_standardizer=Standardizer(data["input_mean"], data["input_std"]),
            output_standardizer=Standardizer(data["output_mean"], data["output_std"]),
            meta=meta.get("model_meta", {}),
        )
        history = data["loss_history"].tolist() if "loss_history" in data else None
        extras = {key: data[f"extra_{key}"] for key in meta.get("extra_keys", [])}
    return model, history, extras


def save_loss_history(path, history) -> None:
    """Write per-epoch losses as ``epoch,loss`` text."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("epoch,loss\n")
        for i, value in enumerate(history, start=1):
            fh.write(f"{i},{value:.17g}\n")
