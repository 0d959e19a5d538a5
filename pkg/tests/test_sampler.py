import json
from pathlib import Path

import numpy as np
import pytest

from s2ifsl.sampler import (SamplerConfig, SamplingError, dumps_episode, episode_from_record,
                            sample_fake_unlabeled_episode, sample_incremental_episode, sample_test_episode,
                            split_by_ratio)
from s2ifsl.types import DatasetBundle, EpisodeSpec, LabelAccessError, Split, ValidationError

GOLDEN = Path(__file__).parent / "golden" / "episode_tiny.json"


def one_shot(mode="semi_supervised", n_u=150, **kw):
    return EpisodeSpec(n_way=5, k_shot=1, n_query_novel=75, n_query_base=75, n_unlabeled_novel=n_u,
                       n_unlabeled_base=n_u, mode=mode, **kw)


def test_incremental_episode_counts(full_size_bundle):
    ep = sample_incremental_episode(full_size_bundle, SamplerConfig(one_shot()), 0, stage="test")
    assert len(ep.support_y) == 5 and len(ep.query_y) == 150 and len(ep.unlabeled_X) == 0
    assert ep.novel_query_mask.sum() == 75
    assert sorted(set(ep.support_y)) == list(range(21, 26))


def test_degenerate_counts():
    X = np.arange(8.0).reshape(4, 2)
    s = Split(X[:2], [1, 2])
    bundle = DatasetBundle(s, s, s, Split(X[2:], [3, 4]), Split(X[:1], [5]), Split(X[:1], [6]))
    spec = EpisodeSpec(n_way=2, k_shot=1, n_query_novel=0, n_query_base=0, mode="inductive")
    ep = sample_incremental_episode(bundle, SamplerConfig(spec), 0)
    assert len(ep.support_y) == 2 and len(ep.query_y) == 0


def test_same_seed_and_index_is_byte_identical(full_size_bundle):
    cfg = SamplerConfig(one_shot(), stream_seed=42)
    a = sample_test_episode(full_size_bundle, cfg, 17)
    b = sample_test_episode(full_size_bundle, cfg, 17)
    assert dumps_episode(a) == dumps_episode(b)
    assert a.query_X.tobytes() == b.query_X.tobytes()
    assert dumps_episode(a) != dumps_episode(sample_test_episode(full_size_bundle, cfg, 18))


def test_fake_unlabeled_counts_one_and_five_shot(full_size_bundle):
    ep = sample_fake_unlabeled_episode(full_size_bundle, SamplerConfig(one_shot()), 3, stage="test")
    assert len(ep.unlabeled_X) == 300
    five = EpisodeSpec(n_way=5, k_shot=5, n_unlabeled_novel=250, n_unlabeled_base=250)
    ep5 = sample_fake_unlabeled_episode(full_size_bundle, SamplerConfig(five), 3, stage="test")
    assert len(ep5.unlabeled_X) == 500 and len(ep5.support_y) == 25


def test_fake_unlabeled_draws_from_train_pools_and_hides_labels(tiny_bundle):
    spec = EpisodeSpec(n_way=2, k_shot=1, n_query_novel=4, n_query_base=4, n_unlabeled_novel=6,
                       n_unlabeled_base=6)
    ep = sample_fake_unlabeled_episode(tiny_bundle, SamplerConfig(spec), 0)
    src = ep.sources
    assert set(tiny_bundle.novel_train.y[src["unlabeled_novel"]]) <= tiny_bundle.novel_train.classes
    assert not set(src["unlabeled_novel"]) & (set(src["support"]) | set(src["query_novel"]))
    with pytest.raises(LabelAccessError):
        ep.unlabeled_y
    with ep.oracle_view():
        assert (ep.unlabeled_y > tiny_bundle.n_base).sum() == 6
    assert ep.label_access_count == 1


def test_zero_unlabeled_in_semi_mode_is_an_error(tiny_bundle):
    spec = EpisodeSpec(n_way=2, n_query_novel=2, n_query_base=2, n_unlabeled_novel=0, n_unlabeled_base=0,
                       mode="semi_supervised")
    with pytest.raises(SamplingError):
        sample_fake_unlabeled_episode(tiny_bundle, SamplerConfig(spec), 0)


def test_transductive_aliases_query(full_size_bundle):
    ep = sample_test_episode(full_size_bundle, SamplerConfig(one_shot("transductive")), 5)
    assert len(ep.unlabeled_X) == 150
    assert ep.unlabeled_X is ep.query_X
    assert ep.unlabeled_is_query


@pytest.mark.parametrize("ratio,expected", [((2, 1), (200, 100)), ((1, 0), (300, 0)), ((0, 1), (0, 300)),
                                            ((1, 1), (150, 150)), ((3, 1), (225, 75))])
def test_ratio_split(ratio, expected, full_size_bundle):
    assert split_by_ratio(300, ratio) == expected
    ep = sample_test_episode(full_size_bundle, SamplerConfig(one_shot(), ratio), 0)
    with ep.oracle_view():
        n_novel = int((ep.unlabeled_y > full_size_bundle.n_base).sum())
    assert (len(ep.unlabeled_X) - n_novel, n_novel) == expected


def test_zero_ratio_rejected_in_semi_mode():
    with pytest.raises(ValidationError):
        SamplerConfig(one_shot(), (0, 0))


def test_insufficient_examples_names_the_class(tiny_bundle):
    spec = EpisodeSpec(n_way=2, k_shot=30, n_query_novel=30, n_query_base=0, mode="inductive")
    with pytest.raises(SamplingError, match=r"class \d+ in novel_train"):
        sample_incremental_episode(tiny_bundle, SamplerConfig(spec), 0)


def test_test_and_val_episodes_use_their_splits(tiny_bundle):
    spec = EpisodeSpec(n_way=2, k_shot=1, n_query_novel=4, n_query_base=4, mode="inductive")
    for stage, novel in (("test", tiny_bundle.novel_test), ("val", tiny_bundle.novel_val)):
        ep = sample_test_episode(tiny_bundle, SamplerConfig(spec), 1, stage=stage)
        assert set(ep.label_map) <= novel.classes


def test_base_queries_have_no_within_episode_duplicates(full_size_bundle):
    ep = sample_test_episode(full_size_bundle, SamplerConfig(one_shot()), 9)
    base = np.concatenate([ep.sources["query_base"], ep.sources["unlabeled_base"]])
    assert len(np.unique(base)) == len(base)


def test_record_roundtrip(tiny_bundle):
    spec = EpisodeSpec(n_way=2, k_shot=2, n_query_novel=4, n_query_base=3, n_unlabeled_novel=2,
                       n_unlabeled_base=2)
    ep = sample_test_episode(tiny_bundle, SamplerConfig(spec, stream_seed=5), 4)
    again = episode_from_record(tiny_bundle, json.loads(dumps_episode(ep)))
    np.testing.assert_array_equal(again.query_X, ep.query_X)
    np.testing.assert_array_equal(again.support_y, ep.support_y)
    np.testing.assert_array_equal(again.unlabeled_X, ep.unlabeled_X)


def test_golden_episode(tiny_bundle):
    spec = EpisodeSpec(n_way=3, k_shot=1, n_query_novel=6, n_query_base=4, n_unlabeled_novel=3,
                       n_unlabeled_base=3)
    ep = sample_test_episode(tiny_bundle, SamplerConfig(spec, stream_seed=2022), 7)
    assert json.loads(dumps_episode(ep)) == json.loads(GOLDEN.read_text())
