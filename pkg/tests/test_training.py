import numpy as np
import pytest

from maskrank.dataio import Corpus, SyntheticSpec, gen_synthetic
from maskrank.encoder import EncoderConfig
from maskrank.sampler import InsufficientDataError
from maskrank.training import (
    BENCHMARK_SPEC,
    ConfigError,
    ExperimentConfig,
    evaluate_params,
    run_cell,
    train,
)

TINY = EncoderConfig(input_shape=(8, 8, 3), stream_width=4, level_widths=(8, 8, 8), dim=16)


@pytest.fixture(scope="module")
def corpus():
    return gen_synthetic(SyntheticSpec(identities=20, images_per_identity=4, test_identities=4, seed=1))


def two_identity_corpus():
    """Two well-separated identities, evaluated on their own images."""
    c = gen_synthetic(SyntheticSpec(identities=2, images_per_identity=8, sigma=0.05, seed=3))
    n = len(c)
    split = np.where(np.arange(n) % 8 < 2, "query", "gallery")
    return Corpus(
        np.concatenate([c.images, c.images]),
        np.concatenate([c.masks, c.masks]),
        np.concatenate([c.identity, c.identity]),
        np.concatenate([c.camera, c.camera]),
        np.concatenate([c.split, split]),
    )


class TestConfig:
    def test_json_round_trip(self):
        cfg = ExperimentConfig(loss="npair", alpha=0.5, lam=2.0, encoder=TINY, steps=3)
        assert ExperimentConfig.from_json(cfg.to_json()) == cfg

    def test_lambda_alias(self):
        assert ExperimentConfig.from_json({"lambda": 3.0}).lam == 3.0

    @pytest.mark.parametrize("kw", [{"loss": "hinge"}, {"steps": 0}, {"alpha": 2.5}, {"lam": -1}, {"P": 1},
                                    {"pretrain_steps": -1}, {"lr": -0.1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json({"stepz": 3})

    def test_overrides_skip_none(self):
        cfg = ExperimentConfig()
        assert cfg.with_overrides(seed=None) is cfg
        assert cfg.with_overrides(seed=4).seed == 4

    def test_benchmark_definition(self):
        assert (BENCHMARK_SPEC.identities, BENCHMARK_SPEC.images_per_identity) == (60, 8)
        cfg = ExperimentConfig()
        assert (cfg.alpha, cfg.lam, cfg.P, cfg.N) == (0.2, 1.0, 10, 54)

    def test_warm_start_changes_result(self, corpus):
        base = ExperimentConfig(P=3, N=8, encoder=TINY, steps=2, pretrain_steps=0)
        warm = train(base.with_overrides(pretrain_steps=3), corpus)
        cold = train(base, corpus)
        assert len(warm.losses) == len(cold.losses) == 2
        assert warm.losses != cold.losses


class TestTrain:
    def test_deterministic(self, corpus):
        cfg = ExperimentConfig(P=3, N=8, encoder=TINY, steps=5, pretrain_steps=2)
        a, b = train(cfg, corpus), train(cfg, corpus)
        assert a.losses == b.losses
        for k in a.params.arrays:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    @pytest.mark.parametrize("loss", ["softmax", "triplet", "npair", "ranking"])
    def test_each_loss_runs(self, corpus, loss):
        res, report = run_cell(ExperimentConfig(loss=loss, pretrain_steps=0, P=3, N=8, encoder=TINY, steps=3), corpus)
        assert len(res.losses) == 3 and all(np.isfinite(res.losses))
        assert 0 <= report.map <= 1

    def test_shape_mismatch(self, corpus):
        cfg = ExperimentConfig(pretrain_steps=0, P=3, N=8, encoder=EncoderConfig(input_shape=(4, 4, 3), dim=8), steps=1)
        with pytest.raises(ConfigError):
            train(cfg, corpus)

    def test_insufficient_identities(self, corpus):
        with pytest.raises(InsufficientDataError):
            train(ExperimentConfig(pretrain_steps=0, P=3, N=30, encoder=TINY, steps=1), corpus)

    def test_ranking_loss_decreases(self):
        corpus = gen_synthetic(SyntheticSpec(identities=60, images_per_identity=8, seed=2))
        res = train(ExperimentConfig(loss="ranking", steps=500, pretrain_steps=0), corpus)
        assert np.mean(res.losses[-20:]) < np.mean(res.losses[:20])

    def test_separable_pair_reaches_rank1(self):
        cfg = ExperimentConfig(loss="ranking", P=4, N=1, encoder=TINY, steps=200, pretrain_steps=0)
        res, report = run_cell(cfg, two_identity_corpus())
        assert report.rank(1) == 1.0

    def test_zero_mask_evaluation_differs(self, corpus):
        res = train(ExperimentConfig(P=3, N=8, encoder=TINY, steps=3, pretrain_steps=0), corpus)
        a = evaluate_params(res.params, corpus)
        b = evaluate_params(res.params, corpus, use_masks=False)
        assert a.per_query != b.per_query
