"""The LightMove network.

Pipeline: embed a recent session with dot-product attention, embed the
long-term history without attention, stack both into an initial hidden
matrix, evolve each row through a GRU-style continuous dynamics function
with optional discrete jump cells between integration segments, then
classify the resized hidden rows (joined with a user embedding) into a
per-step distribution over locations.

All parameters live in a ParamStore; forward passes run under a Tape so
training can differentiate end to end through the solver.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nm
from . import odeint
from .errors import ConfigError, ShapeError
from .numerics import ParamStore, Tensor
from .odeint import SolveSpec

JUMP_KINDS = ("gru", "fc")
JUMP_SCHEMES = ("boundary", "interior_final")
RESIZE_KINDS = ("slice_last", "fc")
ROW_ORDERS = ("long_first", "short_first")
ARCHS = ("node", "gru")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The hidden width is always loc_dim + time_dim; it is derived, never
    set directly.
    """

    num_locations: int
    num_users: int
    loc_dim: int = 32
    time_dim: int = 8
    user_dim: int = 8
    num_time_slots: int = 24
    session_len: int = 9
    horizon: int = 3
    jumps: int = 2
    jump_kind: str = "gru"
    jump_scheme: str = "boundary"
    solver: SolveSpec = field(default_factory=SolveSpec)
    fine_tune: bool = False
    dropout: float = 0.0
    resize_kind: str = "slice_last"
    resize_rows: int | None = None
    row_order: str = "long_first"
    arch: str = "node"

    def __post_init__(self):
        if isinstance(self.solver, dict):
            self.solver = SolveSpec(**self.solver)
        if self.horizon > self.session_len:
            raise ConfigError(
                f"horizon {self.horizon} exceeds session length {self.session_len}"
            )
        for name, value in (
            ("num_locations", self.num_locations),
            ("num_users", self.num_users),
            ("loc_dim", self.loc_dim),
            ("time_dim", self.time_dim),
            ("user_dim", self.user_dim),
            ("num_time_slots", self.num_time_slots),
            ("session_len", self.session_len),
            ("horizon", self.horizon),
        ):
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.jumps < 0:
            raise ConfigError(f"jumps must be >= 0, got {self.jumps}")
        if self.jump_kind not in JUMP_KINDS:
            raise ConfigError(f"jump_kind must be one of {JUMP_KINDS}, got {self.jump_kind!r}")
        if self.jump_scheme not in JUMP_SCHEMES:
            raise ConfigError(f"jump_scheme must be one of {JUMP_SCHEMES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.resize_kind not in RESIZE_KINDS:
            raise ConfigError(f"resize_kind must be one of {RESIZE_KINDS}")
        if self.resize_kind == "fc" and not self.resize_rows:
            raise ConfigError("resize_kind 'fc' needs resize_rows")
        if self.row_order not in ROW_ORDERS:
            raise ConfigError(f"row_order must be one of {ROW_ORDERS}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}")

    @property
    def hidden(self) -> int:
        return self.loc_dim + self.time_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class HistoryBatch:
    """One prediction instance: recent session, earlier history, user.

    Entries are (location index, time-slot index) pairs; the session must
    be nonempty and no longer than the configured session length.
    """

    session: np.ndarray  # (|S|, 2) int
    history: np.ndarray  # (|L|, 2) int
    user: int

    def __post_init__(self):
        self.session = np.asarray(self.session, dtype=np.intp).reshape(-1, 2)
        self.history = np.asarray(self.history, dtype=np.intp).reshape(-1, 2)
        if self.session.shape[0] == 0:
            raise ValueError("session must be nonempty")


# ---------------------------------------------------------------------------
# Parameter construction


GATES = ("reset", "update", "cand")


def _rng_for(name: str, seed: int) -> np.random.Generator:
    # per-tensor stream: initialization is independent of creation order
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _uniform(name, seed, shape, half_width=0.1):
    return _rng_for(name, seed).uniform(-half_width, half_width, size=shape)


def _add_gate_triple(store, prefix, d, seed):
    for gate in GATES:
        store.add(f"{prefix}.{gate}_w", _uniform(f"{prefix}.{gate}_w", seed, (d, d)), penalized=True)
        store.add(f"{prefix}.{gate}_u", _uniform(f"{prefix}.{gate}_u", seed, (d, d)), penalized=True)
        store.add(f"{prefix}.{gate}_b", np.zeros(d))


def _identity_affine(n_prefix: int, n_rest: int) -> np.ndarray:
    """Weight for an affine map whose output reproduces the input prefix."""
    w = np.zeros((n_prefix, n_prefix + n_rest))
    w[:, :n_prefix] = np.eye(n_prefix)
    return w


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    """Fresh parameter store for the given configuration.

    Embeddings and weight matrices start uniform in (-0.1, 0.1); biases
    start at zero. The adaptive generator starts as an exact identity so
    generated gate parameters equal the fixed ones at step 0.
    """
    d = config.hidden
    store = ParamStore()
    store.add("embed.location", _uniform("embed.location", seed, (config.num_locations, config.loc_dim)))
    store.add("embed.time", _uniform("embed.time", seed, (config.num_time_slots, config.time_dim)))
    store.add("embed.user", _uniform("embed.user", seed, (config.num_users, config.user_dim)))

    if config.arch == "gru":
        _add_gate_triple(store, "gru", d, seed)
    else:
        _add_gate_triple(store, "ode", d, seed)
        if config.jumps >= 1 or config.jump_scheme == "interior_final":
            if config.jump_kind == "gru":
                _add_gate_triple(store, "jump", d, seed)
            else:
                store.add("jump.fc_w", _uniform("jump.fc_w", seed, (d, d)), penalized=True)
                store.add("jump.fc_b", np.zeros(d))
        if config.fine_tune:
            dd = d * d
            store.add("gen.update_w.weight", _identity_affine(dd, d), penalized=True)
            store.add("gen.update_w.bias", np.zeros(dd))
            store.add("gen.update_u.weight", _identity_affine(dd, d), penalized=True)
            store.add("gen.update_u.bias", np.zeros(dd))
            store.add("gen.update_b.weight", _identity_affine(d, d), penalized=True)
            store.add("gen.update_b.bias", np.zeros(d))

    store.add(
        "cls.weight",
        _uniform("cls.weight", seed, (config.num_locations, d + config.user_dim)),
        penalized=True,
    )
    store.add("cls.bias", np.zeros(config.num_locations))
    if config.resize_kind == "fc":
        store.add(
            "cls.resize",
            _uniform("cls.resize", seed, (config.horizon, config.resize_rows)),
            penalized=True,
        )
    return store


def count_params(config: ModelConfig) -> int:
    """Closed-form number of scalars in init_params(config)."""
    d = config.hidden
    gate_triple = 3 * (2 * d * d + d)
    total = (
        config.num_locations * config.loc_dim
        + config.num_time_slots * config.time_dim
        + config.num_users * config.user_dim
    )
    if config.arch == "gru":
        total += gate_triple
    else:
        total += gate_triple  # dynamics gates
        if config.jumps >= 1 or config.jump_scheme == "interior_final":
            total += gate_triple if config.jump_kind == "gru" else d * d + d
        if config.fine_tune:
            dd = d * d
            total += 2 * ((dd + d) * dd + dd)  # two affine maps (d^2+d) -> d^2
            total += 2 * d * d + d  # one affine map (2d) -> d
    total += config.num_locations * (d + config.user_dim) + config.num_locations
    if config.resize_kind == "fc":
        total += config.horizon * config.resize_rows
    return total


# ---------------------------------------------------------------------------
# Encoders


def _lookup(pairs: np.ndarray, params: ParamStore, config: ModelConfig, training, rng):
    """Embed (location, time-slot) pairs into rows, with dropout."""
    loc = nm.gather_rows(params["embed.location"], pairs[:, 0])
    slot = nm.gather_rows(params["embed.time"], pairs[:, 1])
    emb = nm.concat(loc, slot, axis=1)
    return nm.dropout(emb, config.dropout, training, rng)


def encode_short(session, params, config, training=False, rng=None):
    """Attentive encoding of the recent session.

    Embeds each entry, forms pairwise dot-product attention across the
    session, and returns the attention-mixed rows.
    """
    pairs = np.asarray(session, dtype=np.intp).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ValueError("encode_short needs a nonempty session")
    emb = _lookup(pairs, params, config, training, rng)
    attn = nm.row_softmax(nm.matmul(emb, nm.transpose(emb)))
    return nm.matmul(attn, emb)


def encode_long(history, params, config, training=False, rng=None):
    """Plain embedding of the long-term history: lookup only, no mixing."""
    pairs = np.asarray(history, dtype=np.intp).reshape(-1, 2)
    if pairs.shape[0] == 0:
        return Tensor(np.zeros((0, config.hidden)))
    return _lookup(pairs, params, config, training, rng)


def build_init(h_short, h_long, order: str = "short_first"):
    """Stack the two encodings into the initial hidden matrix."""
    if h_short.shape[1] != h_long.shape[1]:
        raise ShapeError(
            f"width mismatch: short {h_short.shape} vs long {h_long.shape}"
        )
    if h_long.shape[0] == 0:
        return h_short
    if order == "short_first":
        return nm.concat(h_short, h_long, axis=0)
    if order == "long_first":
        return nm.concat(h_long, h_short, axis=0)
    raise ConfigError(f"unknown row order {order!r}")


# ---------------------------------------------------------------------------
# Continuous dynamics and jumps


def _gate_affine(h, wt, ut, b, h_for_u=None):
    lin = nm.add(nm.matmul(h, wt), nm.matmul(h_for_u if h_for_u is not None else h, ut))
    return nm.add_rowvec(lin, b)


def gru_ode_func(h, t, gates):
    """State derivative of the gated dynamics.

    reset and candidate act like a GRU's gates on the current state; the
    update gate blends toward the candidate, so the derivative is
    (1 - update) * (candidate - state). `gates` holds pre-transposed
    weight tensors (suffix `_wt`/`_ut`) plus bias vectors.
    """
    del t  # autonomous dynamics; time accepted for interface generality
    reset = nm.sigmoid(_gate_affine(h, gates["reset_wt"], gates["reset_ut"], gates["reset_b"]))
    update = nm.sigmoid(_gate_affine(h, gates["update_wt"], gates["update_ut"], gates["update_b"]))
    cand = nm.tanh(
        _gate_affine(h, gates["cand_wt"], gates["cand_ut"], gates["cand_b"], nm.hadamard(reset, h))
    )
    return nm.hadamard(nm.scale(update, -1.0, 1.0), nm.sub(cand, h))


def _transposed_gates(params: ParamStore, prefix: str) -> dict:
    gates = {}
    for gate in GATES:
        gates[f"{gate}_wt"] = nm.transpose(params[f"{prefix}.{gate}_w"])
        gates[f"{gate}_ut"] = nm.transpose(params[f"{prefix}.{gate}_u"])
        gates[f"{gate}_b"] = params[f"{prefix}.{gate}_b"]
    return gates


def generate_adaptive(params: ParamStore, h0_row, config: ModelConfig):
    """Input-conditioned replacement for the update-gate parameters.

    Flattens each fixed update-gate tensor, joins it with the row's
    initial state, and maps it through the generator's affine layers back
    into gate-shaped tensors. Only the update gate is replaced.
    """
    if not config.fine_tune:
        raise ConfigError("adaptive generation requires fine_tune")
    if h0_row.shape[0] != 1:
        raise ShapeError(f"expected a single row, got {h0_row.shape}")
    d = config.hidden

    def gen(flat_in, key, out_shape):
        joined = nm.concat(flat_in, h0_row, axis=1)
        out = nm.add_rowvec(
            nm.matmul(joined, nm.transpose(params[f"gen.{key}.weight"])),
            params[f"gen.{key}.bias"],
        )
        return nm.reshape(out, out_shape)

    w_new = gen(nm.reshape(params["ode.update_w"], (1, d * d)), "update_w", (d, d))
    u_new = gen(nm.reshape(params["ode.update_u"], (1, d * d)), "update_u", (d, d))
    b_new = gen(nm.reshape(params["ode.update_b"], (1, d)), "update_b", (d,))
    return w_new, u_new, b_new


def _jump(j, h_prev, params: ParamStore, config: ModelConfig):
    """Discrete state update between integration segments."""
    if config.jump_kind == "fc":
        return nm.tanh(nm.add_rowvec(nm.matmul(j, nm.transpose(params["jump.fc_w"])), params["jump.fc_b"]))
    # GRU cell: input = post-integration state, hidden = pre-segment state
    g = _transposed_gates(params, "jump")
    reset = nm.sigmoid(
        nm.add_rowvec(nm.add(nm.matmul(j, g["reset_wt"]), nm.matmul(h_prev, g["reset_ut"])), g["reset_b"])
    )
    update = nm.sigmoid(
        nm.add_rowvec(nm.add(nm.matmul(j, g["update_wt"]), nm.matmul(h_prev, g["update_ut"])), g["update_b"])
    )
    cand = nm.tanh(
        nm.add_rowvec(
            nm.add(nm.matmul(j, g["cand_wt"]), nm.matmul(nm.hadamard(reset, h_prev), g["cand_ut"])),
            g["cand_b"],
        )
    )
    return nm.add(nm.hadamard(nm.scale(update, -1.0, 1.0), cand), nm.hadamard(update, h_prev))


def _segments(config: ModelConfig):
    """(t_start, t_end, jump_after) triples covering the unit interval."""
    if config.jump_scheme == "interior_final":
        n = config.jumps + 1
        return [(k / n, (k + 1) / n, True) for k in range(n)]
    if config.jumps == 0:
        return [(0.0, 1.0, False)]
    n = config.jumps
    return [(k / n, (k + 1) / n, True) for k in range(n)]


def _evolve_one(h0, params, config, gates):
    h = h0
    for t0, t1, jump_after in _segments(config):
        spec = config.solver.over(t0, t1)
        j = odeint.integrate(h, spec, lambda hh, tt, _p: gru_ode_func(hh, tt, gates), None)
        h = _jump(j, h, params, config) if jump_after else j
    return h


def evolve(h_init, params: ParamStore, config: ModelConfig):
    """Evolve every row of the initial matrix over the unit interval.

    Rows are independent. Without fine_tune all rows share one dynamics
    function and move as a batch; with fine_tune each row first generates
    its own update-gate parameters from its initial state.
    """
    if h_init.shape[0] < 1:
        raise ShapeError("evolve needs at least one row")
    base = _transposed_gates(params, "ode")
    if not config.fine_tune:
        return _evolve_one(h_init, params, config, base)
    rows = []
    for i in range(h_init.shape[0]):
        row = nm.gather_rows(h_init, [i])
        w_new, u_new, b_new = generate_adaptive(params, row, config)
        gates = dict(base)
        gates["update_wt"] = nm.transpose(w_new)
        gates["update_ut"] = nm.transpose(u_new)
        gates["update_b"] = b_new
        rows.append(_evolve_one(row, params, config, gates))
    return nm.stack_rows(rows)


def gru_lipschitz_bound(params: ParamStore, prefix: str, state_bound: float) -> float:
    """Upper bound on the dynamics' Lipschitz constant over states whose
    entries stay within `state_bound` in magnitude."""

    def norm(name):
        return float(np.linalg.norm(params[f"{prefix}.{name}"].data, 2))

    wz = norm("update_w") + norm("update_u")
    wr = norm("reset_w") + norm("reset_u")
    dm = norm("cand_w") + norm("cand_u") * (1.0 + 0.25 * state_bound * wr)
    return (1.0 + state_bound) * 0.25 * wz + dm + 1.0


# ---------------------------------------------------------------------------
# Classifier and full forward


def classify(h, user: int, params: ParamStore, config: ModelConfig):
    """Per-step location distributions from the evolved hidden rows."""
    n = h.shape[0]
    user_rows = nm.gather_rows(params["embed.user"], np.full(n, user, dtype=np.intp))
    aug = nm.concat(h, user_rows, axis=1)
    m = config.horizon
    if config.resize_kind == "slice_last":
        if n < m:
            raise ShapeError(f"cannot slice {m} rows from {n} hidden rows")
        last = nm.gather_rows(aug, np.arange(n - m, n))
    else:
        if n != config.resize_rows:
            raise ShapeError(
                f"resize FC expects {config.resize_rows} rows, got {n}"
            )
        last = nm.matmul(params["cls.resize"], aug)
    logits = nm.add_rowvec(nm.matmul(last, nm.transpose(params["cls.weight"])), params["cls.bias"])
    return nm.row_softmax(logits)


def _gru_scan(h_init, params: ParamStore, config: ModelConfig):
    """Plain recurrent baseline core: scan a GRU cell over the rows."""
    g = _transposed_gates(params, "gru")
    h = Tensor(np.zeros((1, config.hidden)))
    outs = []
    for i in range(h_init.shape[0]):
        x = nm.gather_rows(h_init, [i])
        reset = nm.sigmoid(
            nm.add_rowvec(nm.add(nm.matmul(x, g["reset_wt"]), nm.matmul(h, g["reset_ut"])), g["reset_b"])
        )
        update = nm.sigmoid(
            nm.add_rowvec(nm.add(nm.matmul(x, g["update_wt"]), nm.matmul(h, g["update_ut"])), g["update_b"])
        )
        cand = nm.tanh(
            nm.add_rowvec(
                nm.add(nm.matmul(x, g["cand_wt"]), nm.matmul(nm.hadamard(reset, h), g["cand_ut"])),
                g["cand_b"],
            )
        )
        h = nm.add(nm.hadamard(nm.scale(update, -1.0, 1.0), cand), nm.hadamard(update, h))
        outs.append(h)
    return nm.stack_rows(outs)


def forward(batch: HistoryBatch, params: ParamStore, config: ModelConfig, training=False, rng=None):
    """Full model: encode, stack, evolve, classify."""
    if config.arch == "gru":
        # recurrent baseline shares embeddings and head but skips attention
        parts = []
        if batch.history.shape[0]:
            parts.append(_lookup(batch.history, params, config, training, rng))
        parts.append(_lookup(batch.session, params, config, training, rng))
        h_init = parts[0] if len(parts) == 1 else nm.concat(parts[0], parts[1], axis=0)
        hidden = _gru_scan(h_init, params, config)
    else:
        h_short = encode_short(batch.session, params, config, training, rng)
        h_long = encode_long(batch.history, params, config, training, rng)
        h_init = build_init(h_short, h_long, order=config.row_order)
        hidden = evolve(h_init, params, config)
    return classify(hidden, batch.user, params, config)
