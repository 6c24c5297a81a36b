"""ID-free forward pass: projection, positional encoding, fusion, graph
propagation over the augmented user-item adjacency."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import simgraph
from .autodiff import Tensor, TracedCSR
from .dataset import FeatureMatrix, InteractionSet, user_modal_features
from .sparse import SparseCSR


class ConfigError(ValueError):
    pass


@dataclass
class AblationFlags:
    use_pe: bool = True
    use_asg: bool = True
    use_static_graphs: bool = True
    use_age: bool = True
    use_align: bool = True

    def validate(self) -> "AblationFlags":
        if self.use_asg and not self.use_age:
            raise ConfigError("use_asg requires use_age: gated graphs only live in the augmented adjacency")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "AblationFlags":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
        return cls(**d).validate()


# Rows of the module ablation table, as flag sets.
ABLATION_ROWS = {
    "all": AblationFlags(),
    "-PE": AblationFlags(use_pe=False),
    "-ASG": AblationFlags(use_asg=False),
    "-ASG-AGE": AblationFlags(use_asg=False, use_age=False),
    "-align": AblationFlags(use_align=False),
}


@dataclass
class ModelConfig:
    d: int = 64
    alpha: float = 0.5
    k: int = 10
    layers: int = 3
    include_layer0: bool = False
    asg_pairing: str = "cross"
    ln_eps: float = 1e-5
    flags: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> "ModelConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.d < 1 or self.k < 1:
            raise ConfigError("d and k must be positive")
        if self.asg_pairing not in ("cross", "same"):
            raise ConfigError(f"asg_pairing must be cross or same, got {self.asg_pairing!r}")
        self.flags.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        flags = AblationFlags.from_dict(d.pop("flags", {}))
        return cls(flags=flags, **d)


PARAM_ORDER = (
    "W_t", "b_t", "ln_t_gain", "ln_t_shift",
    "W_v", "b_v", "ln_v_gain", "ln_v_shift",
    "asg_user_W0", "asg_user_W1", "asg_user_b0", "asg_user_b1",
    "asg_item_W0", "asg_item_W1", "asg_item_b0", "asg_item_b1",
)


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(d_text: int, d_visual: int, d: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p = {
        "W_t": _xavier(rng, d_text, d), "b_t": np.zeros(d),
        "ln_t_gain": np.ones(d), "ln_t_shift": np.zeros(d),
        "W_v": _xavier(rng, d_visual, d), "b_v": np.zeros(d),
        "ln_v_gain": np.ones(d), "ln_v_shift": np.zeros(d),
    }
    for side in ("user", "item"):
        p[f"asg_{side}_W0"] = _xavier(rng, d, d)
        p[f"asg_{side}_W1"] = _xavier(rng, d, d)
        p[f"asg_{side}_b0"] = np.zeros(d)
        p[f"asg_{side}_b1"] = np.zeros(d)
    return {k: p[k].astype(np.float32) for k in PARAM_ORDER}


def gate_params(params: dict, side: str) -> dict:
    return {k: params[f"asg_{side}_{k}"] for k in ("W0", "W1", "b0", "b1")}


@dataclass
class ModelInputs:
    """Everything the forward pass reads besides parameters."""

    n_users: int
    n_items: int
    text: np.ndarray     # (n_users + n_items) x d_text, users first
    visual: np.ndarray   # (n_users + n_items) x d_visual
    r_train: SparseCSR
    ru_static: SparseCSR
    ri_static: SparseCSR
    cold_users: np.ndarray

    @property
    def n_total(self) -> int:
        return self.n_users + self.n_items

    @property
    def dims(self) -> tuple[int, int]:
        return self.text.shape[1], self.visual.shape[1]


def build_inputs(data: InteractionSet, item_text: FeatureMatrix, item_visual: FeatureMatrix,
                 k: int, graphs: dict | None = None,
                 block_size: int = simgraph.DEFAULT_BLOCK) -> ModelInputs:
    """Derive user features and the static kNN graphs (unless ``graphs``
    supplies the per-modality graphs ``S_U_t, S_U_v, S_I_t, S_I_v``)."""
    user_t, cold = user_modal_features(data.train, item_text)
    user_v, _ = user_modal_features(data.train, item_visual)
    if graphs is None:
        graphs = static_graphs(user_t, user_v, item_text, item_visual, k, block_size)
    ru = simgraph.fuse_modal_graphs(graphs["S_U_t"], graphs["S_U_v"])
    ri = simgraph.fuse_modal_graphs(graphs["S_I_t"], graphs["S_I_v"])
    return ModelInputs(
        data.n_users, data.n_items,
        np.concatenate([user_t.data, item_text.data]).astype(np.float64),
        np.concatenate([user_v.data, item_visual.data]).astype(np.float64),
        data.train, ru, ri, cold,
    )


def static_graphs(user_t, user_v, item_t, item_v, k, block_size=simgraph.DEFAULT_BLOCK) -> dict:
    return {
        "S_U_t": simgraph.cosine_topk(user_t, k, block_size).csr,
        "S_U_v": simgraph.cosine_topk(user_v, k, block_size).csr,
        "S_I_t": simgraph.cosine_topk(item_t, k, block_size).csr,
        "S_I_v": simgraph.cosine_topk(item_v, k, block_size).csr,
    }


def project(x, W, b, gain, shift, eps: float = 1e-5) -> Tensor:
    """LayerNorm(tanh(x W + b)), row-wise."""
    x = ad.as_tensor(x)
    if x.shape[1] != ad.as_tensor(W).shape[0]:
        raise ValueError(f"feature width {x.shape[1]} does not match projection {ad.as_tensor(W).shape}")
    return ad.layernorm(ad.tanh(ad.add(ad.matmul(x, W), b)), gain, shift, eps)


@lru_cache(maxsize=32)
def _pe_table(n: int, d: int) -> np.ndarray:
    dp = d + (d % 2)
    pos = np.arange(n, dtype=np.float64)[:, None]
    j = np.arange(dp // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * j / dp)
    pe = np.empty((n, dp))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe = pe[:, :d]
    pe.setflags(write=False)
    return pe


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal table: even columns sin(pos / 10000^(2j/d)), odd columns cos.

    Odd ``d`` is computed at ``d + 1`` and truncated.  The returned array is a
    cached read-only view.
    """
    return _pe_table(int(n), int(d))


def add_positional(h_t, h_v, p) -> tuple[Tensor, Tensor]:
    p = ad.as_tensor(p)
    return ad.add(h_t, p), ad.add(h_v, p)


def fuse(ht, hv, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    return ad.add(ad.scale(ht, alpha), ad.scale(hv, 1.0 - alpha))


def propagate(a_hat, h0, layers: int, include_layer0: bool = False) -> Tensor:
    """Mean of ``A_hat^l H0`` over ``l = 1..L`` (``l = 0..L`` with
    ``include_layer0``)."""
    if layers < 1:
        raise ConfigError(f"layers must be >= 1, got {layers}")
    h = ad.as_tensor(h0)
    acc = h if include_layer0 else None
    for _ in range(layers):
        h = ad.spmm(a_hat, h)
        acc = h if acc is None else ad.add(acc, h)
    return ad.scale(acc, 1.0 / (layers + int(include_layer0)))


@dataclass
class EmbeddingBundle:
    n_users: int
    h_t: Tensor
    h_v: Tensor
    p: np.ndarray | None
    ht_tilde: Tensor
    hv_tilde: Tensor
    fused: Tensor
    E: Tensor
    adjacency: object = None   # normalised adjacency used, if any

    @property
    def E_U(self) -> np.ndarray:
        return self.E.value[: self.n_users]

    @property
    def E_I(self) -> np.ndarray:
        return self.E.value[self.n_users:]


def pe_rows(n_users: int, n_items: int, d: int) -> np.ndarray:
    """Users and items index the same table separately."""
    return np.concatenate([positional_encoding(n_users, d), positional_encoding(n_items, d)])


def forward(params: dict, inputs: ModelInputs, config: ModelConfig, mode: str = "train",
            r_graph: SparseCSR | None = None, timer=None) -> EmbeddingBundle:
    """Run the full pipeline.

    ``params`` maps names to tensors (tape leaves when training).  In
    ``"train"`` mode ``r_graph`` is the (possibly denoised) interaction matrix;
    in ``"infer"`` mode the full training matrix is used and, with ASG on, the
    similarity blocks are rebuilt from the fused embeddings.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be train or infer, got {mode!r}")
    config.validate()
    flags = config.flags
    timer = timer or _NullTimer()
    nu, ni, d = inputs.n_users, inputs.n_items, config.d
    P = {k: ad.as_tensor(v) for k, v in params.items()}

    with timer("project"):
        text = ad.constant(inputs.text)
        visual = ad.constant(inputs.visual)
        h_t = project(text, P["W_t"], P["b_t"], P["ln_t_gain"], P["ln_t_shift"], config.ln_eps)
        h_v = project(visual, P["W_v"], P["b_v"], P["ln_v_gain"], P["ln_v_shift"], config.ln_eps)
    with timer("pe"):
        if flags.use_pe:
            p = pe_rows(nu, ni, d)
            ht, hv = add_positional(h_t, h_v, p)
        else:
            p, ht, hv = None, h_t, h_v
    fused = fuse(ht, hv, config.alpha)

    if not flags.use_age:
        return EmbeddingBundle(nu, h_t, h_v, p, ht, hv, fused, fused)

    r = inputs.r_train if (mode == "infer" or r_graph is None) else r_graph
    with timer("asg"):
        if flags.use_asg and mode == "train":
            ru = simgraph.adaptive_weights(
                inputs.ru_static, ad.slice_rows(ht, 0, nu), ad.slice_rows(hv, 0, nu),
                gate_params(P, "user"), config.asg_pairing)
            ri = simgraph.adaptive_weights(
                inputs.ri_static, ad.slice_rows(ht, nu, nu + ni), ad.slice_rows(hv, nu, nu + ni),
                gate_params(P, "item"), config.asg_pairing)
        elif flags.use_asg:
            ru, ri = simgraph.inference_graphs(fused.value[:nu], fused.value[nu:], config.k)
        elif flags.use_static_graphs:
            ru, ri = inputs.ru_static, inputs.ri_static
        else:
            ru, ri = SparseCSR.empty(nu, nu), SparseCSR.empty(ni, ni)
    with timer("age"):
        a_hat = simgraph.laplacian_normalize(simgraph.assemble_traced(r, ru, ri))
        E = propagate(a_hat, fused, config.layers, config.include_layer0)
    return EmbeddingBundle(nu, h_t, h_v, p, ht, hv, fused, E, a_hat)


class _NullTimer:
    def __call__(self, name):
        return self

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
