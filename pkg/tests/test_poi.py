import numpy as np
import pytest

from nextloc.autodiff import Tensor
from nextloc.ingest import DataFormatError, TrajectoryPair, VisitRecord
from nextloc.poi import (
    CITY_CATEGORIES,
    PAD_TOKEN,
    SINGAPORE_CATEGORIES,
    PoiCategory,
    category_semantic_embeddings,
    encode_descriptions,
    location_poi_embedding,
    location_poi_init,
    normalize_profiles,
    pooled_poi_init,
    read_catalog,
    read_profiles,
    tokenize,
    trajectory_poi_embeddings,
    write_catalog,
    write_profiles,
)

from conftest import small_model_config
from nextloc.backbone import build_model


@pytest.fixture
def model():
    return build_model(small_model_config(), len(CITY_CATEGORIES), seed=3, categories=CITY_CATEGORIES)


def test_tokenize_is_case_and_punctuation_blind():
    assert tokenize("Shopping, DINING!") == tokenize("shopping dining")
    assert all(1 <= t <= 4096 for t in tokenize("a b c 123"))
    assert tokenize("") == []


def test_identical_descriptions_give_identical_rows():
    cats = [PoiCategory(0, "a", "Parks and trails"), PoiCategory(1, "b", "Parks and trails")]
    toks = encode_descriptions(cats, 8)
    assert np.array_equal(toks[0], toks[1])


def test_padding_and_truncation():
    cats = [PoiCategory(0, "a", "one two"), PoiCategory(1, "b", " ".join(["w"] * 50))]
    toks = encode_descriptions(cats, 6)
    assert toks.shape == (2, 6)
    assert list(toks[0, 2:]) == [PAD_TOKEN] * 4 and toks[0, 0] != PAD_TOKEN
    assert PAD_TOKEN not in toks[1]


def test_catalogs_are_well_formed():
    for cats in (CITY_CATEGORIES, SINGAPORE_CATEGORIES):
        assert [c.id for c in cats] == list(range(5))
        assert encode_descriptions(cats).shape == (5, 32)
    with pytest.raises(ValueError):
        PoiCategory(0, "x", "   ")
    with pytest.raises(ValueError):
        encode_descriptions([PoiCategory(1, "x", "y")])


def test_semantic_gather_golden():
    table = np.arange(12, dtype=float).reshape(6, 2)
    toks = np.array([[1, 2, 0], [5, 0, 0]])
    sem = category_semantic_embeddings(table, toks)
    assert sem.shape == (2, 3, 2)
    assert sem[0].tolist() == [[2, 3], [4, 5], [0, 1]]
    assert sem[1, 0].tolist() == [10, 11]


def test_location_init_zero_onehot_linear(rng):
    sem = rng.normal(size=(3, 4, 2))
    assert np.all(location_poi_init([0, 0, 0], sem) == 0)
    assert np.allclose(location_poi_init([0, 1, 0], sem), sem[1])
    a, b = rng.random(3), rng.random(3)
    assert np.allclose(location_poi_init(2 * a + b, sem), 2 * location_poi_init(a, sem) + location_poi_init(b, sem))
    with pytest.raises(ValueError):
        location_poi_init([1, 0], sem)


def test_pooled_init_matches_explicit_sum(model, rng):
    P = model.tensors()
    freq = rng.random((2, 5))
    sem = category_semantic_embeddings(model.params["token_table"], model.desc_tokens)
    explicit = np.stack([location_poi_init(f, sem).mean(axis=0) for f in freq])
    got = pooled_poi_init(P, Tensor(freq.astype(np.float32)), model.desc_tokens).data
    assert np.allclose(got, explicit, atol=1e-5)


def test_category_permutation_invariance(model):
    perm = np.array([3, 0, 4, 1, 2])
    freq = np.array([1.0, 0, 2, 5, 0])
    a = location_poi_embedding(freq, model.tensors(), model.desc_tokens)
    b = location_poi_embedding(freq[perm], model.tensors(), model.desc_tokens[perm])
    assert np.allclose(a, b, atol=1e-5)


def _pair(ids):
    recs = [VisitRecord(lid, 0, 9, 30.0, 1000.0 * i) for i, lid in enumerate(ids)]
    return TrajectoryPair(tuple(recs[:8]), tuple(recs[8:11]), 0, 1e6)


def test_branches_use_separate_heads(model):
    profiles = {i: np.eye(5)[i % 5] for i in range(12)}
    hist, cur = trajectory_poi_embeddings(_pair([0] * 11), profiles, model.tensors(), model.desc_tokens)
    assert hist.shape == (8, 16) and cur.shape == (3, 16)
    # same location, different head
    assert not np.allclose(hist[0], cur[0])
    assert np.allclose(hist[0], hist[-1])


def test_missing_profile_is_an_error(model):
    with pytest.raises(KeyError):
        trajectory_poi_embeddings(_pair(list(range(11))), {0: np.ones(5)}, model.tensors(), model.desc_tokens)


def test_normalize_profiles_handles_empty_rows():
    out = normalize_profiles(np.array([[2.0, 2.0], [0.0, 0.0]]))
    assert out.tolist() == [[0.5, 0.5], [0.0, 0.0]]


def test_catalog_and_profile_files(tmp_path):
    write_catalog(tmp_path / "c.csv", SINGAPORE_CATEGORIES)
    assert tuple(read_catalog(tmp_path / "c.csv")) == SINGAPORE_CATEGORIES
    profiles = {0: np.array([1.0, 0, 2]), 1: np.zeros(3)}
    write_profiles(tmp_path / "p.csv", profiles)
    back = read_profiles(tmp_path / "p.csv", [0, 1], 3)
    assert all(np.array_equal(back[k], profiles[k]) for k in profiles)
    with pytest.raises(DataFormatError):
        read_profiles(tmp_path / "p.csv", [1], 3)
