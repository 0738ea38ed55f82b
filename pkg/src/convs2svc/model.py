"""Source/target encoders, target decoder and reconstructor, and attention.

Each network is described by a :class:`NetworkSpec` (a plain layer chain with
channel counts) before any weights exist, so full-size architectures can be
inspected and counted cheaply; :class:`Network` instantiates a spec.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import diffkernel as dk
from .diffkernel import NormParams, ParamStore, Tensor
from .errors import ConfigError, ModeError, ShapeError
from .features import N_MCC, base_dim

MODES = ("pairwise", "many2many", "any2many", "realtime")
NETWORKS = ("src_enc", "trg_enc", "trg_rec", "trg_dec")


@dataclass
class ModelConfig:
    mode: str = "pairwise"
    n_speakers: int = 2
    n_mcc: int = N_MCC
    r: int = 3
    hidden: int = 0          # 0 -> 64 pairwise, 96 otherwise
    key_dim: int = 0         # D'; 0 -> hidden
    embed_dim: int = 32
    groups: int = 3
    blocks: int = 4
    kernel: int = 5
    causal_kernel: int = 3
    norm: str = ""           # "" -> batch (pairwise) / conditional-batch
    dropout: float = 0.1
    dtype: str = "float64"
    init_seed: int = 0

    @property
    def feature_dim(self) -> int:
        return base_dim(self.n_mcc) * self.r

    def resolved(self) -> "ModelConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        hidden = self.hidden or (64 if self.mode == "pairwise" else 96)
        norm = self.norm or ("batch" if self.mode == "pairwise" else "conditional-batch")
        if norm not in dk.NORM_MODES:
            raise ConfigError(f"unknown norm {norm!r}")
        if self.kernel % 2 == 0:
            raise ConfigError("non-causal kernel size must be odd")
        if self.mode != "pairwise" and self.n_speakers < 2:
            raise ConfigError(f"{self.mode} needs at least two speakers")
        return replace(self, hidden=hidden, key_dim=self.key_dim or hidden, norm=norm)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LayerSpec:
    kind: str                # drop | embed | conv | norm | glu
    in_ch: int
    out_ch: int
    kernel: int = 1
    dilation: int = 1
    causal: bool = False


@dataclass
class NetworkSpec:
    name: str
    layers: list[LayerSpec]
    conditioned: bool
    causal: bool
    norm: str
    embed_dim: int = 0
    n_speakers: int = 1

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_ch

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_ch

    def validate(self) -> None:
        prev = self.layers[0].in_ch
        for layer in self.layers:
            if layer.in_ch != prev:
                raise ShapeError(f"{self.name}: layer {layer} expects {layer.in_ch}, gets {prev}")
            if layer.kind == "embed" and layer.out_ch != layer.in_ch + self.embed_dim:
                raise ShapeError(f"{self.name}: embedding append must add {self.embed_dim} channels")
            if layer.kind == "glu" and layer.out_ch > layer.in_ch:
                raise ShapeError(f"{self.name}: GLU residual needs out <= in")
            prev = layer.out_ch

    def param_count(self) -> int:
        k = self.n_speakers if self.norm.startswith("conditional") else 1
        norm_rows = 0 if self.norm == "none" else 2 * k
        total = self.n_speakers * self.embed_dim if self.conditioned else 0
        for layer in self.layers:
            if layer.kind == "conv":
                total += layer.out_ch * layer.in_ch * layer.kernel + layer.out_ch
            elif layer.kind == "norm":
                total += norm_rows * layer.out_ch
            elif layer.kind == "glu":
                o2 = 2 * layer.out_ch
                total += o2 * layer.in_ch * layer.kernel + o2 + norm_rows * o2
        return total


def network_spec(cfg: ModelConfig, name: str) -> NetworkSpec:
    """Layer chain of one network, following the published architecture table."""
    cfg = cfg.resolved()
    if name not in NETWORKS:
        raise ValueError(f"unknown network {name!r}")
    d, c, dk_, e = cfg.feature_dim, cfg.hidden, cfg.key_dim, cfg.embed_dim
    causal = name in ("trg_enc", "trg_dec") or (cfg.mode == "realtime" and name in ("src_enc", "trg_rec"))
    conditioned = cfg.mode != "pairwise" and not (cfg.mode == "any2many" and name == "src_enc")
    in_ch = {"src_enc": d, "trg_enc": d, "trg_rec": dk_, "trg_dec": dk_}[name]
    out_ch = {"src_enc": 2 * dk_, "trg_enc": dk_, "trg_rec": d, "trg_dec": d}[name]
    kernel = cfg.causal_kernel if causal else cfg.kernel
    norm = cfg.norm
    if not conditioned and norm.startswith("conditional-"):
        norm = norm[len("conditional-"):]
    extra = e if conditioned else 0

    layers: list[LayerSpec] = [LayerSpec("drop", in_ch, in_ch)]
    ch = in_ch

    def embed():
        nonlocal ch
        if conditioned:
            layers.append(LayerSpec("embed", ch, ch + e))
            ch += e

    embed()
    layers.append(LayerSpec("conv", ch, c, 1, 1, causal))
    ch = c
    layers.append(LayerSpec("norm", c, c))
    for _ in range(cfg.groups):
        for l in range(cfg.blocks):
            embed()
            layers.append(LayerSpec("glu", c + extra, c, kernel, 3 ** l, causal))
            ch = c
    embed()
    layers.append(LayerSpec("conv", ch, out_ch, 1, 1, causal))
    spec = NetworkSpec(name, layers, conditioned, causal, norm,
                       e if conditioned else 0, cfg.n_speakers)
    spec.validate()
    return spec


def count_parameters(cfg: ModelConfig) -> int:
    return sum(network_spec(cfg, n).param_count() for n in NETWORKS)


@dataclass
class GluBlockParams:
    """Both dilated convolutions of a gated block, stored stacked.

    Rows [:o] of ``weight``/``bias`` are the linear branch, rows [o:] the
    gate branch; ``norm`` spans all 2o channels, which is the same as two
    independent per-branch normalizations.
    """

    weight: Tensor
    bias: Tensor
    norm: NormParams
    kernel: int
    dilation: int
    causal: bool
    in_channels: int
    out_channels: int

    @property
    def conv1_weight(self) -> np.ndarray:
        return self.weight.value[:self.out_channels]

    @property
    def conv2_weight(self) -> np.ndarray:
        return self.weight.value[self.out_channels:]

    @property
    def conv1_bias(self) -> np.ndarray:
        return self.bias.value[:self.out_channels]

    @property
    def conv2_bias(self) -> np.ndarray:
        return self.bias.value[self.out_channels:]


def _conv_init(rng, out_ch, in_ch, kernel):
    bound = 1.0 / math.sqrt(in_ch * kernel)
    return rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel))


def glu_block(x, p: GluBlockParams, speaker=None, training: bool = False, mask=None) -> Tensor:
    """B1(L1(x)) * sigmoid(B2(L2(x))) + x[:, :o]."""
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"GLU block expects {p.in_channels} channels, got {x.shape[1]}")
    h = dk.conv1d(x, p.weight, p.bias, p.dilation, p.causal)
    h = dk.batch_norm(h, p.norm, speaker, training, mask)
    return dk.gated_residual(h, dk.as_tensor(x), mask)


@dataclass
class _Context:
    mask: np.ndarray | None
    speaker: np.ndarray | None
    training: bool
    rng: np.random.Generator | None
    dropout: float


class Network:
    def __init__(self, spec: NetworkSpec, store: ParamStore, rng: np.random.Generator):
        self.spec = spec
        self.layers: list[tuple[LayerSpec, object]] = []
        name = spec.name
        self.embedding = None
        if spec.conditioned:
            self.embedding = store.parameter(
                f"{name}.embedding", rng.standard_normal((spec.n_speakers, spec.embed_dim)) * 0.01)
        for i, layer in enumerate(spec.layers):
            prefix = f"{name}.{i}.{layer.kind}"
            params = None
            if layer.kind == "conv":
                params = (store.parameter(f"{prefix}.weight", _conv_init(rng, layer.out_ch, layer.in_ch, layer.kernel)),
                          store.parameter(f"{prefix}.bias", np.zeros(layer.out_ch)))
            elif layer.kind == "norm":
                params = NormParams.create(store, prefix, layer.out_ch, spec.norm, spec.n_speakers)
            elif layer.kind == "glu":
                o2 = 2 * layer.out_ch
                params = GluBlockParams(
                    store.parameter(f"{prefix}.weight", _conv_init(rng, o2, layer.in_ch, layer.kernel)),
                    store.parameter(f"{prefix}.bias", np.zeros(o2)),
                    NormParams.create(store, f"{prefix}.norm", o2, spec.norm, spec.n_speakers),
                    layer.kernel, layer.dilation, layer.causal, layer.in_ch, layer.out_ch)
            self.layers.append((layer, params))

    def norms(self) -> list[NormParams]:
        out = []
        for layer, params in self.layers:
            if layer.kind == "norm":
                out.append(params)
            elif layer.kind == "glu":
                out.append(params.norm)
        return out

    def __call__(self, x, ctx: _Context) -> Tensor:
        x = dk.as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"{self.spec.name} expects (b, {self.spec.in_channels}, n), got {x.shape}")
        if x.shape[2] < 1:
            raise ShapeError(f"{self.spec.name}: empty input")
        norm_speaker = ctx.speaker if self.spec.norm.startswith("conditional") else None
        for i, (layer, params) in enumerate(self.layers):
            kind = layer.kind
            if kind == "drop":
                x = dk.dropout(x, ctx.dropout, ctx.rng, ctx.training)
            elif kind == "embed":
                x = dk.append_embedding(x, self.embedding, ctx.speaker, ctx.mask)
            elif kind == "conv":
                w, b = params
                x = dk.conv1d(x, w, b, layer.dilation, layer.causal)
                if i == len(self.layers) - 1 and ctx.mask is not None:
                    x = dk.mul(x, ctx.mask)
            elif kind == "norm":
                x = dk.batch_norm(x, params, norm_speaker, ctx.training, ctx.mask)
            elif kind == "glu":
                x = glu_block(x, params, norm_speaker, ctx.training, ctx.mask)
        return x


def _as_batch(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor(arr)


class ConvS2SModel:
    """The four networks plus parameter storage.

    All tensors are (batch, channel, time). Masks are (batch, 1, time) arrays
    of 0/1; ``speaker`` arguments are integer arrays of shape (batch,).
    """

    def __init__(self, config: ModelConfig):
        self.config = config.resolved()
        self.dtype = np.dtype(self.config.dtype)
        self.store = ParamStore(self.dtype)
        rng = np.random.default_rng(self.config.init_seed)
        self.specs = {name: network_spec(self.config, name) for name in NETWORKS}
        self.networks = {name: Network(self.specs[name], self.store, rng) for name in NETWORKS}
        self.store.pack()

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def key_dim(self) -> int:
        return self.config.key_dim

    def num_parameters(self) -> int:
        return self.store.num_parameters()

    def norms(self) -> list[NormParams]:
        return [p for net in self.networks.values() for p in net.norms()]

    def _run(self, name, x, mask, speaker, training, rng):
        net = self.networks[name]
        x = _as_batch(x, self.dtype)
        if net.spec.conditioned:
            if speaker is None:
                raise ModeError(f"{self.mode}: {name} needs a speaker index")
            speaker = np.broadcast_to(np.asarray(speaker, dtype=np.int64), (x.shape[0],))
            if speaker.min() < 0 or speaker.max() >= self.config.n_speakers:
                raise ModeError(f"speaker index out of range 0..{self.config.n_speakers - 1}")
        elif speaker is not None:
            raise ModeError(f"{self.mode}: {name} does not take a speaker index")
        if mask is not None:
            mask = np.asarray(mask, dtype=self.dtype)
        ctx = _Context(mask, speaker, training, rng, self.config.dropout)
        return net(x, ctx)

    def src_encode(self, x, mask=None, speaker=None, training=False, rng=None) -> tuple[Tensor, Tensor]:
        out = self._run("src_enc", x, mask, speaker, training, rng)
        d = self.key_dim
        return dk.getitem(out, (slice(None), slice(0, d))), dk.getitem(out, (slice(None), slice(d, 2 * d)))

    def trg_encode(self, y, mask=None, speaker=None, training=False, rng=None) -> Tensor:
        return self._run("trg_enc", y, mask, speaker, training, rng)

    def trg_decode(self, r, mask=None, speaker=None, training=False, rng=None) -> Tensor:
        return self._run("trg_dec", r, mask, speaker, training, rng)

    def trg_reconstruct(self, r, mask=None, speaker=None, training=False, rng=None) -> Tensor:
        return self._run("trg_rec", r, mask, speaker, training, rng)

    @staticmethod
    def attend(k, q, src_mask=None) -> Tensor:
        """softmax over source frames of K^T Q / sqrt(D'); result (b, N, M)."""
        k, q = dk.as_tensor(k), dk.as_tensor(q)
        if k.shape[-2] != q.shape[-2]:
            raise ShapeError(f"key dim {k.shape[-2]} != query dim {q.shape[-2]}")
        logits = dk.mul(dk.matmul(dk.transpose(k), q), 1.0 / math.sqrt(k.shape[-2]))
        if src_mask is not None:
            src_mask = np.swapaxes(np.asarray(src_mask), -1, -2)
        return dk.softmax_columns(logits, src_mask)

    @staticmethod
    def warp(v, a) -> Tensor:
        """R = V A."""
        v, a = dk.as_tensor(v), dk.as_tensor(a)
        if v.shape[-1] != a.shape[-2]:
            raise ShapeError(f"V has {v.shape[-1]} frames but A has {a.shape[-2]} rows")
        return dk.matmul(v, a)

    def speaker_args(self, batch) -> tuple[np.ndarray | None, np.ndarray | None]:
        src = batch.src_spk if self.specs["src_enc"].conditioned else None
        trg = batch.trg_spk if self.specs["trg_enc"].conditioned else None
        return src, trg

    def forward(self, batch, training: bool = False, rng=None) -> "Outputs":
        """Teacher-forced pass over a padded batch (see trainer.make_batch)."""
        src_spk, trg_spk = self.speaker_args(batch)
        k, v = self.src_encode(batch.src, batch.src_mask, src_spk, training, rng)
        q = self.trg_encode(batch.trg_in, batch.trg_mask, trg_spk, training, rng)
        a = self.attend(k, q, batch.src_mask)
        r = dk.mul(self.warp(v, a), batch.trg_mask)
        y = self.trg_decode(r, batch.trg_mask, trg_spk, training, rng)
        y_rec = self.trg_reconstruct(r, batch.trg_mask, trg_spk, training, rng)
        return Outputs(k, v, q, a, r, y, y_rec)

    def calibrate_norms(self, batches) -> None:
        """Populate batch-norm running statistics without touching parameters."""
        rng = np.random.default_rng(0)
        with dk.no_grad():
            for batch in batches:
                self.forward(batch, training=True, rng=rng)


@dataclass
class Outputs:
    keys: Tensor
    values: Tensor
    queries: Tensor
    attention: Tensor
    warped: Tensor
    decoded: Tensor
    reconstructed: Tensor
