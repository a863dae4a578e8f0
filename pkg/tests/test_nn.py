import math
import time

import numpy as np
import pytest

import gradcheck
import oracles
from selfprog.dsl import CnnSpec, TransformerSpec, initial_cnn_spec, initial_transformer_spec
from selfprog.nn import (
    ArrayData,
    BuildError,
    CharVocab,
    DeadlineExceeded,
    DivergenceError,
    TaskShape,
    TrainConfig,
    accuracy,
    build,
    build_seq2seq,
    cnn_param_count,
    cross_entropy,
    make_batch,
    param_count,
    propagate_shapes,
    seq2seq_param_count,
    train,
)
from selfprog.nn.checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from selfprog.nn.seq2seq import BOS, EOS, PAD, TokenPairs


@pytest.mark.parametrize("layer", sorted(gradcheck.LAYER_CHECKS))
def test_layer_gradients(layer):
    assert gradcheck.worst_error(layer, instances=100) <= 1e-4


@pytest.mark.parametrize("classes", [2, 10, 62, 1000])
def test_cross_entropy_uniform_logits_is_log_classes(classes):
    loss, _ = cross_entropy(np.zeros((7, classes)), np.arange(7) % classes)
    assert abs(loss - math.log(classes)) <= 1e-9


def test_cross_entropy_known_value():
    # softmax puts 0.7 on the true class
    logits = np.log(np.array([[0.7, 0.2, 0.1]]))
    loss, _ = cross_entropy(logits, np.array([0]))
    assert loss == pytest.approx(-math.log(0.7), abs=1e-12)
    assert loss == pytest.approx(0.356675, abs=1e-6)


def test_cross_entropy_matches_reference_and_is_stable():
    rng = np.random.default_rng(3)
    logits = rng.normal(0, 5, (20, 9))
    labels = rng.integers(0, 9, 20)
    assert cross_entropy(logits, labels)[0] == pytest.approx(oracles.reference_cross_entropy(logits, labels), rel=1e-12)
    loss, grad = cross_entropy(np.array([[1000.0, -1000.0]]), np.array([1]))
    assert loss == pytest.approx(2000.0) and np.all(np.isfinite(grad))


def test_whole_cnn_gradient():
    rng = np.random.default_rng(0)
    spec = CnnSpec((3, 2), (5,), (7, 7, 2), 4, True)
    net = build(spec, seed=1, dtype=np.float64)
    for p in net.params():
        p.value += rng.normal(0, 0.05, p.value.shape)
    x, y = rng.normal(size=(3, 7, 7, 2)), rng.integers(0, 4, 3)
    net.zero_grad()
    net.loss_and_grad((x, y))
    for p in net.params():
        numeric = oracles.numeric_grad(lambda: cross_entropy(net.forward(x), y)[0], p.value)
        assert oracles.rel_error(p.grad, numeric) <= 1e-4


def test_whole_seq2seq_gradient():
    rng = np.random.default_rng(1)
    vocab = CharVocab()
    model = build_seq2seq(TransformerSpec(1, 1, 6, 2, 4), vocab.size, 8, seed=2, dtype=np.float64)
    for p in model.params():
        p.value += rng.normal(0, 0.05, p.value.shape)
    batch = make_batch([(vocab.encode("e2 d1", 8), vocab.encode("e3 d1", 8)), (vocab.encode("h4", 8), vocab.encode("h8", 8))])
    model.zero_grad()
    model.loss_and_grad(batch)
    worst = 0.0
    for p in model.params():
        numeric = oracles.numeric_grad(lambda: model.loss(batch), p.value)
        scale = max(np.linalg.norm(p.grad), np.linalg.norm(numeric))
        if scale > 1e-6:
            worst = max(worst, oracles.rel_error(p.grad, numeric))
    assert worst <= 1e-4


def test_flatten_size_matches_walker():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = int(rng.integers(0, 9))
        spec = CnnSpec((16,) * c, (16,), (int(rng.integers(3, 33)), int(rng.integers(3, 33)), 1), 10, bool(c) and bool(rng.integers(2)))
        expected = oracles.walk_shapes(spec.input_shape, spec.conv_channels, spec.pool_after_convs)
        if expected is None:
            with pytest.raises(BuildError):
                propagate_shapes(spec)
        else:
            assert propagate_shapes(spec)[-len(spec.hidden_sizes) - 2][1] == (expected,)


def test_param_counts_agree_three_ways():
    spec = initial_cnn_spec()
    assert cnn_param_count(spec) == 12730 == oracles.mlp_param_count(784, [16], 10)
    assert param_count(build(spec)) == 12730
    spec = CnnSpec((4, 8), (32, 16), (12, 12, 3), 5, True)
    conv = 4 * 3 * 9 + 4 + 8 * 4 * 9 + 8
    assert cnn_param_count(spec) == param_count(build(spec)) == conv + oracles.mlp_param_count(8 * 4 * 4, [32, 16], 5)
    assert cnn_param_count(CnnSpec((), (8,), (8, 8, 1), 10, False)) == 610


def test_seq2seq_param_count_matches_enumeration():
    for spec in (initial_transformer_spec(), TransformerSpec(1, 3, 100, 4, 64)):
        model = build_seq2seq(spec, CharVocab().size, 24)
        assert param_count(model) == seq2seq_param_count(spec, CharVocab().size)


def test_build_rejects_task_mismatch_and_transformers():
    with pytest.raises(BuildError):
        build(initial_cnn_spec(), TaskShape((32, 32, 3), 10))
    with pytest.raises(BuildError):
        build(initial_cnn_spec(), TaskShape((28, 28, 1), 62))
    with pytest.raises(BuildError):
        build(initial_transformer_spec())


def test_describe_matches_rendered_layers():
    from selfprog.dsl import cnn_layer_lines

    spec = CnnSpec((8, 8), (16,), (28, 28, 1), 10, True)
    assert build(spec).describe() == cnn_layer_lines(spec)


def _toy_data(n=512, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4, 4, 1)).astype(np.float32)
    y = (x[:, :2].sum(axis=(1, 2, 3)) > 0).astype(np.int64)
    return x, y


def test_training_learns_separable_task_deterministically():
    x, y = _toy_data()
    spec = CnnSpec((), (16,), (4, 4, 1), 2, False)
    reports = []
    for _ in range(2):
        net = build(spec, seed=3)
        reports.append(train(net, ArrayData(x, y), TrainConfig(epochs=10, lr=1e-2, seed=1)))
    assert reports[0].step_losses == reports[1].step_losses
    assert reports[0].epoch_losses[-1] < reports[0].epoch_losses[0] * 0.6
    assert accuracy(net, x, y) > 0.9


def test_untrained_accuracy_is_near_chance():
    rng = np.random.default_rng(5)
    x = rng.random((1000, 8, 8, 1)).astype(np.float32)
    y = rng.integers(0, 10, 1000)
    accs = [accuracy(build(CnnSpec((), (16,), (8, 8, 1), 10, False), seed=s), x, y) for s in range(5)]
    assert all(abs(a - 0.1) <= 0.05 for a in accs)


def test_zero_epochs_and_empty_eval():
    x, y = _toy_data(64)
    net = build(CnnSpec((), (4,), (4, 4, 1), 2, False))
    assert train(net, ArrayData(x, y), TrainConfig(epochs=0)).steps == 0
    with pytest.raises(ValueError):
        accuracy(net, x[:0], y[:0])


def test_step_count_follows_batching():
    x, y = _toy_data(1024)
    net = build(CnnSpec((), (4,), (4, 4, 1), 2, False))
    assert train(net, ArrayData(x, y), TrainConfig(batch_size=32)).steps == 32


def test_divergence_and_deadline():
    x, y = _toy_data(64)
    net = build(CnnSpec((), (4,), (4, 4, 1), 2, False))
    with pytest.raises(DeadlineExceeded):
        train(net, ArrayData(x, y), TrainConfig(), deadline=time.monotonic() - 1)
    x_bad = x.copy()
    x_bad[0, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train(net, ArrayData(x_bad, y), TrainConfig(batch_size=64))


def test_vocab_roundtrip_and_batching():
    vocab = CharVocab()
    ids = vocab.encode("e2 d2 h8 f1024", 24)
    assert ids[-1] == EOS and vocab.decode(ids) == "e2 d2 h8 f1024"
    assert len(vocab.encode("x" * 0 + "1" * 40, 24)) == 24
    src, tgt_in, tgt_out = make_batch([([5, EOS], [6, 7, EOS]), ([5, 6, 7, EOS], [EOS])])
    assert tgt_in[0].tolist() == [BOS, 6, 7] and tgt_out[0].tolist() == [6, 7, EOS]
    assert src[0].tolist() == [5, EOS, PAD, PAD]


def test_seq2seq_learns_copy_and_greedy_is_deterministic():
    vocab = CharVocab()
    rng = np.random.default_rng(0)
    texts = ["".join(rng.choice(list("0123456789"), 3)) for _ in range(1024)]
    pairs = TokenPairs([(vocab.encode(t, 8), vocab.encode(t, 8)) for t in texts])
    model = build_seq2seq(TransformerSpec(1, 1, 64, 4, 32), vocab.size, 8, seed=0)
    report = train(model, pairs, TrainConfig(epochs=4, lr=3e-3))
    assert report.epoch_losses[-1] < 0.5 * report.epoch_losses[0]
    src = vocab.encode("123", 8)
    a = model.generate(src, 2, np.random.default_rng(0), temperature=0)
    b = model.generate(src, 2, np.random.default_rng(9), temperature=0)
    assert a == b and a[0] == a[1]
    assert len(model.generate(src, 5, np.random.default_rng(1))) == 5


def test_checkpoint_roundtrip_and_errors(tmp_path):
    model = build_seq2seq(TransformerSpec(1, 1, 16, 2, 8), CharVocab().size, 12, seed=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {"note": "x"})
    meta, tensors = read_checkpoint(path)
    assert meta == {"note": "x"}
    other = build_seq2seq(TransformerSpec(1, 1, 16, 2, 8), CharVocab().size, 12, seed=5)
    load_into(other, tensors)
    for (_, a), (_, b) in zip(model.named_params(), other.named_params()):
        assert np.array_equal(a.value, b.value)
    raw = path.read_bytes()
    assert raw[:8] == b"SPRGCKPT"
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "short")
    with pytest.raises(CheckpointError):
        load_into(build_seq2seq(TransformerSpec(2, 1, 16, 2, 8), CharVocab().size, 12), tensors)
