import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abl import neural
from abl import perception as P
from abl.neural import TrainConfig

CALIBRATION = TrainConfig(learning_rate=0.05, epochs=15, minibatch=16, seed=0)


def calibrate(family):
    """Supervised oracle: 200 labeled glyphs/class, accuracy on 100/class held out."""
    spec = P.GlyphFamilySpec(family)
    X, y = P.labeled_glyphs(spec, 200, seed=1)
    Xt, yt = P.labeled_glyphs(spec, 100, seed=2)
    model = P.retrain(P.PerceptionModel.fresh(0), list(zip(X, y)), CALIBRATION)
    return model, P.perception_accuracy(model, Xt, yt)


@pytest.fixture(scope="module")
def easy_model():
    return calibrate("easy")


def zero_model():
    model = P.PerceptionModel.fresh(0)
    for ps in model.net.params:
        for p in ps:
            p[...] = 0.0
    return model


# --- rendering ----------------------------------------------------------------

def test_noise_free_unjittered_is_prototype():
    spec = P.GlyphFamilySpec("easy", noise=0.0, translate=0.0, rotate=0.0, widths=(1,))
    for c in range(4):
        img = P.render_glyph(c, spec, np.random.default_rng(0))
        assert np.array_equal(img, P.prototype_raster(c, spec))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3), st.sampled_from(["easy", "hard"]), st.integers(0, 2**32 - 1),
       st.floats(0.0, 0.3))
def test_render_deterministic_and_in_range(cls, family, seed, noise):
    spec = P.GlyphFamilySpec(family, noise=noise)
    a = P.render_glyph(cls, spec, np.random.default_rng(seed))
    b = P.render_glyph(cls, spec, np.random.default_rng(seed))
    assert a.shape == (16, 16)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_prototypes_distinct():
    for family in ("easy", "hard"):
        spec = P.GlyphFamilySpec(family)
        rasters = [P.prototype_raster(c, spec) for c in range(4)]
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.array_equal(rasters[i], rasters[j])


def test_spec_validation():
    with pytest.raises(ValueError):
        P.GlyphFamilySpec("medium")
    with pytest.raises(ValueError):
        P.GlyphFamilySpec("easy", noise=-0.1)
    with pytest.raises(ValueError):
        P.GlyphFamilySpec("easy", prototypes=P.EASY_PROTOTYPES[:3])


def test_corpus_regeneration_identical():
    spec = P.GlyphFamilySpec("hard", seed=5)
    a = P.render_many([0, 1, 2, 3, 3], spec, seed=9)
    b = P.render_many([0, 1, 2, 3, 3], spec, seed=9)
    assert np.array_equal(a, b)


# --- calibration ------------------------------------------------------------

def test_easy_family_separable(easy_model):
    assert easy_model[1] >= 0.95


def test_hard_family_between_bounds():
    _, acc = calibrate("hard")
    assert 0.70 <= acc <= 0.95


def test_trained_model_reads_prototypes(easy_model):
    spec = P.GlyphFamilySpec("easy")
    imgs = [P.prototype_raster(c, spec, width=w) for w in (1, 2) for c in range(4)]
    seq, _ = P.perceive(easy_model[0], imgs)
    assert seq == (0, 1, 2, 3, 0, 1, 2, 3)


# --- perceive / retrain -----------------------------------------------------

def test_zero_net_uniform_and_ties_to_zero():
    X, y = P.labeled_glyphs(P.GlyphFamilySpec("easy"), 5, seed=0)
    seq, probs = P.perceive(zero_model(), X)
    assert np.allclose(probs, 0.25)
    assert seq == (0,) * len(X)
    assert P.perception_accuracy(zero_model(), X, y) == 0.25


def test_perceive_shapes():
    X, _ = P.labeled_glyphs(P.GlyphFamilySpec("easy"), 1, seed=0)
    seq, probs = P.perceive(P.PerceptionModel.fresh(1), X[:1])
    assert len(seq) == 1 and probs.shape == (1, 4)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    with pytest.raises(ValueError):
        P.perceive(P.PerceptionModel.fresh(1), [])


def test_arity_enforced():
    net = neural.init_network(neural.decision_spec(3))
    with pytest.raises(ValueError):
        P.PerceptionModel(net)


def test_retrain_on_own_predictions(easy_model):
    model = easy_model[0]
    X, _ = P.labeled_glyphs(P.GlyphFamilySpec("easy"), 10, seed=4)
    own, _ = P.perceive(model, X)
    after = P.retrain(model, list(zip(X, own)), TrainConfig(learning_rate=0.01, epochs=2, minibatch=8))
    _, probs = P.perceive(model, X)
    loss0 = -np.mean(np.log(probs[np.arange(len(X)), own]))
    assert loss0 < 0.1
    assert P.perception_accuracy(after, X, own) >= P.perception_accuracy(model, X, own)


def test_retrain_memorises_corrective_pair():
    model = P.PerceptionModel.fresh(2)
    img = P.labeled_glyphs(P.GlyphFamilySpec("easy"), 1, seed=3)[0][0]
    before, _ = P.perceive(model, [img])
    target = (before[0] + 1) % 4
    after = P.retrain(model, [(img, target)] * 4, TrainConfig(learning_rate=0.05, epochs=30, minibatch=4))
    assert P.perceive(after, [img])[0] == (target,)
    # warm start: the input model is untouched
    assert P.perceive(model, [img])[0] == before


def test_retrain_rejects_empty():
    with pytest.raises(ValueError):
        P.retrain(P.PerceptionModel.fresh(0), [], TrainConfig())


def test_center_outputs_standardises_logits():
    X, _ = P.labeled_glyphs(P.GlyphFamilySpec("easy"), 50, seed=6)
    model = P.center_outputs(P.PerceptionModel.fresh(0), X, spread=0.5)
    logits, _, _ = neural._run(model.net, P._as_batch(X), keep=False)
    assert np.allclose(logits.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(logits.std(axis=0), 0.5, atol=1e-9)
    # a fresh net sends most glyphs to one class; the rescaled one spreads them out
    pred = P.class_probs(model, X).argmax(axis=1)
    assert len(set(pred.tolist())) >= 3


# --- files ------------------------------------------------------------------

def test_image_file_roundtrip(tmp_path):
    X, _ = P.labeled_glyphs(P.GlyphFamilySpec("hard"), 3, seed=0)
    path = tmp_path / "g.bin"
    P.save_images(path, X)
    data = path.read_bytes()
    assert data.startswith(b"ABLIMG1\n")
    assert np.array_equal(P.load_images(path), X)
    assert P.images_to_bytes(P.load_images(path)) == data


def test_image_file_corruption(tmp_path):
    X, _ = P.labeled_glyphs(P.GlyphFamilySpec("easy"), 1, seed=0)
    data = P.images_to_bytes(X)
    with pytest.raises(P.FormatError):
        P.images_from_bytes(b"NOTIMG1\n" + data[8:])
    with pytest.raises(P.FormatError):
        P.images_from_bytes(data[:-8])


def test_corpus_labels_in_sidecar(tmp_path):
    spec = P.GlyphFamilySpec("easy", seed=2)
    X, y = P.labeled_glyphs(spec, 2, seed=1)
    P.save_corpus(tmp_path, spec, X, y)
    got_spec, imgs = P.load_corpus(tmp_path)
    assert got_spec == spec and np.array_equal(imgs, X)
    assert np.array_equal(P.load_corpus_labels(tmp_path), y)
    (tmp_path / "labels.sidecar").write_bytes(b"0\n")
    with pytest.raises(P.FormatError):
        P.load_corpus_labels(tmp_path)
