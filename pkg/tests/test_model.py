import numpy as np
import pytest

from aidkit import attention as attn
from aidkit.errors import ArchiveError, ConfigError, DimensionError
from aidkit.model import (
    CLASS_NAMES,
    ConditionEmbedding,
    KVRecord,
    ModelConfig,
    deserialize_weights,
    encoder_features,
    forward,
    forward_batch,
    init_weights,
    load_weights,
    loss_and_grads,
    make_dataset,
    patchify,
    sample_batch,
    save_weights,
    serialize_weights,
    train,
    unpatchify,
)
from aidkit.numerics import SeededRng
from conftest import assert_bitwise
from oracles import central_difference


def test_patchify_examples():
    assert np.all(patchify(np.full((16, 16), 0.3)) == 0.3)
    img = np.zeros((16, 16))
    img[0, 0] = 1.0
    tok = patchify(img)
    assert tok.shape == (16, 16)
    assert tok[0, 0] == 1.0 and np.count_nonzero(tok) == 1
    img = np.arange(256.0).reshape(16, 16)
    tok = patchify(img)
    # token 1 is the patch in rows 0-3, columns 4-7, flattened row-major
    assert tok[1].tolist() == [4, 5, 6, 7, 20, 21, 22, 23, 36, 37, 38, 39, 52, 53, 54, 55]
    assert tok[4, 0] == 64.0
    assert_bitwise(unpatchify(tok), img)
    with pytest.raises(DimensionError):
        patchify(np.zeros((15, 16)))


def test_dataset_properties():
    d = make_dataset(4, seed=3)
    assert len(d) == 24
    assert d.images.shape == (24, 16, 16)
    assert d.images.min() >= -1 and d.images.max() <= 1
    assert sorted(set(d.labels.tolist())) == list(range(len(CLASS_NAMES)))
    again = make_dataset(4, seed=3)
    assert_bitwise(d.images, again.images)
    assert not np.array_equal(d.images, make_dataset(4, seed=4).images)


def test_forward_deterministic(random_weights):
    z = SeededRng(1).normal((16, 16))
    c = random_weights.condition(2)
    a = forward(z, c, 50, random_weights)
    assert a.shape == (16, 16)
    assert_bitwise(a, forward(z, c, 50, random_weights))


def test_zero_weights_predict_zero(random_weights):
    w = random_weights.zeros_like()
    out = forward(SeededRng(2).normal((16, 16)), w.condition(0), 10, w)
    assert np.array_equal(out, np.zeros((16, 16)))


def test_forward_needs_peers_for_interpolation(random_weights):
    proc = attn.ProcessorSelector(mode="inner", t=0.5)
    with pytest.raises(ConfigError):
        forward(np.zeros((16, 16)), random_weights.condition(0), 5, random_weights, proc=proc)
    with pytest.raises(DimensionError):
        forward(np.zeros((16, 16)), ConditionEmbedding(np.zeros((2, 3))), 5, random_weights)


def _records(w, z1, c1, zm, cm, j):
    r1, rm = KVRecord(), KVRecord()
    e1 = forward(z1, c1, j, w, record=r1)
    forward(zm, cm, j, w, record=rm)
    return e1, (r1, rm)


@pytest.mark.parametrize("mode", ["inner", "outer"])
def test_endpoint_network_identity(random_weights, mode):
    w = random_weights
    rng = SeededRng(3)
    z1, zm = rng.normal((16, 16)), rng.normal((16, 16))
    c1, cm = w.condition(0), w.condition(3)
    for j in (99, 47, 3):
        plain, peers = _records(w, z1, c1, zm, cm, j)
        out = forward(z1, c1, j, w, proc=attn.ProcessorSelector(mode=mode, t=0.0), peers=peers)
        assert np.max(np.abs(out - plain)) < 1e-10
        plain_m, _ = _records(w, zm, cm, z1, c1, j)
        out = forward(zm, cm, j, w, proc=attn.ProcessorSelector(mode=mode, t=1.0), peers=peers)
        assert np.max(np.abs(out - plain_m)) < 1e-10


def test_inner_with_own_peers_equals_plain(random_weights):
    w = random_weights
    z = SeededRng(4).normal((16, 16))
    c = w.condition(1)
    rec = KVRecord()
    plain = forward(z, c, 20, w, record=rec)
    other = KVRecord()
    forward(SeededRng(5).normal((16, 16)), w.condition(4), 20, w, record=other)
    out = forward(z, c, 20, w, proc=attn.ProcessorSelector(mode="inner", t=0.0), peers=(rec, other))
    assert np.max(np.abs(out - plain)) < 1e-12


def test_batch_forward_matches_single(random_weights):
    rng = SeededRng(6)
    z = rng.normal((5, 16, 16))
    labels, js = np.array([0, 1, 2, 3, 5]), np.array([99, 0, 50, 7, 63])
    batch = unpatchify(forward_batch(random_weights, z, labels, js))
    for i in range(5):
        single = forward(z[i], random_weights.condition(int(labels[i])), int(js[i]), random_weights)
        assert np.allclose(batch[i], single, rtol=0, atol=1e-12)
    # no batch-coupled statistics: a sub-batch gives the same rows
    sub = unpatchify(forward_batch(random_weights, z[2:4], labels[2:4], js[2:4]))
    assert np.allclose(sub, batch[2:4], rtol=0, atol=1e-12)


def test_loss_zero_at_stationary_construction(random_weights):
    w = random_weights.zeros_like()
    x0 = np.zeros((3, 16, 16))
    loss, grads = loss_and_grads((x0, np.array([0, 1, 2]), np.zeros((3, 16, 16)), np.array([1, 2, 3])), w)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.params.values())


def test_duplicated_batch_keeps_gradients(random_weights):
    rng = SeededRng(7)
    batch = sample_batch(rng, make_dataset(2, 0), 4, 100)
    doubled = tuple(np.concatenate([b, b]) for b in batch)
    l1, g1 = loss_and_grads(batch, random_weights)
    l2, g2 = loss_and_grads(doubled, random_weights)
    assert l1 == pytest.approx(l2, rel=1e-14)
    for name in g1.names():
        assert np.allclose(g1[name], g2[name], rtol=1e-12, atol=1e-15)


def test_gradient_spot_check(random_weights):
    """A few coordinates per tensor; the acceptance suite runs the full check."""
    w = random_weights
    rng = SeededRng(8)
    batch = sample_batch(rng, make_dataset(2, 1), 2, 100)
    _, grads = loss_and_grads(batch, w)
    for name in w.names():
        arr = w.params[name]
        idx = tuple(int(rng.integers(s, 1)[0]) for s in arr.shape)
        fd = central_difference(lambda: loss_and_grads(batch, w)[0], arr, idx)
        an = grads[name][idx]
        assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-6), name


def test_train_zero_steps_returns_init():
    w = train(make_dataset(1, 0), steps=0, seed=5)
    init = init_weights(ModelConfig(), SeededRng(5))
    assert serialize_weights(w) == serialize_weights(init)


def test_train_deterministic():
    data = make_dataset(5, 0)
    a = train(data, steps=30, lr=1e-3, seed=1)
    b = train(data, steps=30, lr=1e-3, seed=1)
    assert serialize_weights(a) == serialize_weights(b)
    assert serialize_weights(a) != serialize_weights(train(data, steps=30, lr=1e-3, seed=2))


def test_train_reports_divergence():
    from aidkit.errors import TrainingError

    with pytest.raises(TrainingError) as info:
        train(make_dataset(2, 0), steps=50, lr=1e6, seed=0)
    assert info.value.step < 50


def test_checkpoint_round_trip(tmp_path, random_weights):
    path = tmp_path / "w.aidw"
    save_weights(random_weights, path)
    back = load_weights(path)
    assert back.config == random_weights.config
    for name in random_weights.names():
        assert_bitwise(back[name], random_weights[name])
    assert path.read_bytes() == serialize_weights(back)
    assert back.digest() == random_weights.digest()


def test_checkpoint_rejects_corruption(random_weights):
    blob = serialize_weights(random_weights)
    with pytest.raises(ArchiveError):
        deserialize_weights(b"NOTMAGIC" + blob[8:])
    with pytest.raises(ArchiveError):
        deserialize_weights(blob[:-5])
    with pytest.raises(ArchiveError):
        deserialize_weights(blob + b"\x00")


def test_encoder_features(random_weights):
    img = np.tanh(SeededRng(9).normal((16, 16)))
    f = encoder_features(img, random_weights)
    assert f.shape == (16,)
    assert_bitwise(f, encoder_features(img, random_weights))
