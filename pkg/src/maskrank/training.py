"""Sampler -> encoder -> loss -> SGD training loop and the evaluation pass."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import losses
from .dataio import Corpus, DataError, SyntheticSpec, gen_synthetic
from .encoder import EncoderConfig, EncoderParams, embed, encode_batch, init_params, sgd_step
from .evaluation import EvalReport, FeatureSet, evaluate
from .sampler import BatchSampler, BatchSpec, DatasetIndex, check_feasible

LOSSES = ("softmax", "triplet", "npair", "ranking")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    loss: str = "ranking"
    alpha: float = 0.2
    lam: float = 1.0
    P: int = 10
    N: int = 54
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    steps: int = 1500
    pretrain_steps: int = 500
    lr: float = 0.05
    seed: int = 0
    use_masks: bool = True
    manifest: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.pretrain_steps < 0:
            raise ConfigError("pretrain_steps must be >= 0")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        try:
            losses.LossParams(self.alpha, self.lam)
            BatchSpec(self.P, self.N)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def loss_params(self) -> losses.LossParams:
        return losses.LossParams(self.alpha, self.lam)

    @property
    def batch_spec(self) -> BatchSpec:
        return BatchSpec(self.P, self.N)

    def to_json(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = EncoderConfig.from_json({**EncoderConfig().to_json(), **d["encoder"]})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


@dataclass
class TrainResult:
    params: EncoderParams
    losses: list
    config: ExperimentConfig


def _seeds(seed: int):
    init_ss, sampler_ss, head_ss = np.random.SeedSequence(seed).spawn(3)
    return (
        np.random.Generator(np.random.PCG64(init_ss)),
        int(sampler_ss.generate_state(1)[0]),
        np.random.Generator(np.random.PCG64(head_ss)),
    )


def batch_loss(cfg: ExperimentConfig, x: dc.Tensor, labels: np.ndarray, head=None, class_index=None) -> dc.Tensor:
    batch = losses.EmbeddingBatch(x, labels)
    if cfg.loss == "ranking":
        return losses.batch_ranking_loss(batch, cfg.loss_params)
    if cfg.loss == "npair":
        return losses.batch_npair_loss(batch)
    if cfg.loss == "triplet":
        return losses.triplet_loss_hard(batch, cfg.alpha)
    logits = dc.affine(x, head["head.weight"], head["head.bias"])
    return losses.batch_softmax_ce(logits, np.array([class_index[v] for v in labels]))


def train(cfg: ExperimentConfig, corpus: Corpus, log=None) -> TrainResult:
    """SGD on the train split of ``corpus``.

    ``cfg.pretrain_steps`` softmax steps come first (same sampler stream and
    learning rate), then ``cfg.steps`` steps of ``cfg.loss``. Only the second
    phase is logged and returned in ``losses``.
    """
    train_set = corpus.subset("train")
    if not cfg.use_masks:
        train_set = train_set.without_masks()
    if train_set.images.shape[1:] != cfg.encoder.input_shape:
        raise ConfigError(
            f"corpus rasters {train_set.images.shape[1:]} do not match encoder input {cfg.encoder.input_shape}"
        )
    index = DatasetIndex.from_labels(train_set.identity, train_set.camera)
    check_feasible(index, cfg.batch_spec)

    init_rng, sampler_seed, head_rng = _seeds(cfg.seed)
    params = init_params(cfg.encoder, init_rng)
    sampler = BatchSampler(index, cfg.batch_spec, sampler_seed)
    originals = train_set.images
    masked = train_set.masked()

    classes = index.identities
    class_index = {c: i for i, c in enumerate(classes)}
    s = np.sqrt(6.0 / (cfg.encoder.dim + len(classes)))
    head = {
        "head.weight": head_rng.uniform(-s, s, size=(cfg.encoder.dim, len(classes))),
        "head.bias": np.zeros(len(classes)),
    }
    warm = replace(cfg, loss="softmax")

    def step(active_cfg, params, head):
        batch = sampler.sample()
        tape = dc.Tape()
        x = encode_batch(params, originals[batch.records], masked[batch.records], tape)
        use_head = active_cfg.loss == "softmax"
        head_t = {k: tape.param(k, v) for k, v in head.items()} if use_head else None
        loss = batch_loss(active_cfg, x, batch.identity, head_t, class_index)
        grads = dc.backward(tape, output=loss)
        params = sgd_step(params, grads, cfg.lr)
        if use_head:
            head = {k: v - cfg.lr * grads[k] for k, v in head.items()}
        return params, head, loss.item()

    # softmax warm start shared by every loss
    for _ in range(cfg.pretrain_steps):
        params, head, _value = step(warm, params, head)

    history = []
    for i in range(cfg.steps):
        params, head, value = step(cfg, params, head)
        history.append(value)
        if log is not None:
            log(i, value)
    return TrainResult(params, history, cfg)


def feature_set(params: EncoderParams, corpus: Corpus) -> FeatureSet:
    feats = embed(params, corpus.images, corpus.masked())
    return FeatureSet(feats, corpus.identity, corpus.camera)


def evaluate_params(params: EncoderParams, corpus: Corpus, protocol: str = "single", use_masks: bool = True) -> EvalReport:
    if not use_masks:
        corpus = corpus.without_masks()
    query, gallery = corpus.subset("query"), corpus.subset("gallery")
    if len(query) == 0 or len(gallery) == 0:
        raise DataError("corpus needs both query and gallery records")
    return evaluate(feature_set(params, query), feature_set(params, gallery), protocol)


# ------------------------------------------------------- standard benchmark

# 60 training identities x 8 images, plus 100 held-out identities for query/gallery
BENCHMARK_SEED = 20190118
BENCHMARK_SPEC = SyntheticSpec(
    identities=60, images_per_identity=8, sigma=0.3, test_identities=100, seed=BENCHMARK_SEED
)


def benchmark_corpus(spec: SyntheticSpec = BENCHMARK_SPEC) -> Corpus:
    return gen_synthetic(spec)


def run_cell(cfg: ExperimentConfig, corpus: Corpus, protocol: str = "single") -> tuple[TrainResult, EvalReport]:
    result = train(cfg, corpus)
    return result, evaluate_params(result.params, corpus, protocol, use_masks=cfg.use_masks)


def config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_json(), indent=2, sort_keys=True)
