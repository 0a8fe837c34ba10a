import numpy as np
import pytest

from latentreg import diff
from latentreg.descriptor import (BadMagicError, DimensionMismatchError, TrainConfig, TruncatedModelError,
                                  decode, decode_tensor, encode, encode_batch, encode_tensor,
                                  evaluate_reconstruction, init_model, load_model, make_training_batch,
                                  save_model, train, write_train_log)


@pytest.fixture(scope="module")
def small():
    return init_model(latent_dim=8, k_out=16, encoder_widths=(6, 7), decoder_widths=(12, 20), seed=3)


def test_encoder_is_permutation_invariant_and_ignores_duplicates(small):
    x = np.random.default_rng(0).standard_normal((30, 3))
    z = encode(small, x)
    assert np.allclose(encode(small, x[::-1]), z, atol=1e-12)
    assert np.allclose(encode(small, np.vstack([x, x[:5]])), z, atol=1e-12)


def test_numpy_and_tape_paths_agree(small):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 20, 3))
    enc, dec = small.weights(np.float64)
    z_tape = encode_tensor(diff.Tensor(x), [(diff.Tensor(w), diff.Tensor(b)) for w, b in enc]).data
    assert np.allclose(z_tape, encode_batch(small, x, dtype=np.float64), atol=1e-12)
    rec = decode_tensor(diff.Tensor(z_tape[0]), [(diff.Tensor(w), diff.Tensor(b)) for w, b in dec], 16)
    assert np.allclose(rec.data, decode(small, z_tape[0]), atol=1e-12)
    assert rec.shape == (16, 3)


def test_encode_batch_chunking_is_irrelevant(small):
    x = np.random.default_rng(2).standard_normal((9, 15, 3))
    a = encode_batch(small, x, dtype=np.float64, chunk=1)
    b = encode_batch(small, x, dtype=np.float64, chunk=4)
    assert np.allclose(a, b, atol=1e-12)


def test_save_load_round_trip(tmp_path, small):
    save_model(small, tmp_path / "m.plrm")
    back = load_model(tmp_path / "m.plrm")
    assert back.equals(small)


def test_load_errors(tmp_path, small):
    save_model(small, tmp_path / "m.plrm")
    data = (tmp_path / "m.plrm").read_bytes()
    (tmp_path / "magic.plrm").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(BadMagicError):
        load_model(tmp_path / "magic.plrm")
    (tmp_path / "short.plrm").write_bytes(data[:-10])
    with pytest.raises(TruncatedModelError, match="decoder layer 2"):
        load_model(tmp_path / "short.plrm")
    bad = bytearray(data)
    bad[10:14] = (9).to_bytes(4, "little")  # latent field
    (tmp_path / "dim.plrm").write_bytes(bytes(bad))
    with pytest.raises(DimensionMismatchError):
        load_model(tmp_path / "dim.plrm")


def test_training_batch_shapes():
    cfg = TrainConfig(n_points=64, k_out=64)
    src, tgt = make_training_batch(cfg, 5, np.random.default_rng(0))
    assert src.shape == (5, 64, 3) and tgt.shape == (5, 64, 3)
    assert np.all(np.linalg.norm(src, axis=2).max(axis=1) <= 1 + 1e-9)


def _tiny_cfg(**kw):
    base = dict(epochs=3, batch_size=8, samples_per_epoch=32, latent_dim=8, k_out=32, n_points=64,
                encoder_widths=(8, 8), decoder_widths=(16, 32), validation_size=8, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_training_reduces_loss_and_is_deterministic(tmp_path):
    cfg = _tiny_cfg(epochs=6, lr=3e-3)
    a = train(cfg, log_path=tmp_path / "a.csv")
    b = train(cfg, log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.model.equals(b.model)
    assert a.history[-1]["loss"] < a.history[0]["loss"]
    assert a.history[0]["lr"] == 3e-3
    assert np.isfinite(a.validation)


def test_reconstruction_metric_is_chamfer():
    from latentreg.cloud import chamfer
    m = init_model(latent_dim=4, k_out=10, encoder_widths=(5,), decoder_widths=(6,), seed=0)
    src = np.random.default_rng(0).standard_normal((2, 12, 3))
    tgt = np.random.default_rng(1).standard_normal((2, 12, 3))
    rec = [decode(m, encode(m, s)) for s in src]
    expected = np.mean([chamfer(r, t) for r, t in zip(rec, tgt)])
    assert evaluate_reconstruction(m, src, tgt) == pytest.approx(expected, rel=1e-6)


def test_train_log_columns(tmp_path):
    write_train_log(tmp_path / "log.csv", [{"epoch": 1, "loss": 0.5, "lr": 1e-3}])
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,loss,lr"


def test_default_learning_rate():
    assert TrainConfig().lr == 1e-3
