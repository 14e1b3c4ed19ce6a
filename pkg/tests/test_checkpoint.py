import numpy as np
import pytest

from weakseg.autodiff import ParamStore
from weakseg.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint


def sample_checkpoint(seed=0):
    r = np.random.default_rng(seed)
    params = {
        "enc0.ua.w": r.normal(size=(4, 2)),
        "enc0.ua.b": r.normal(size=2),
        "head.w": r.normal(size=(2, 3)),
    }
    velocities = {k: r.normal(size=v.shape) for k, v in params.items()}
    return Checkpoint(
        config_text="[run]\nmode = baseline\n",
        stage_index=1,
        epoch=42,
        params=params,
        velocities=velocities,
    )


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        ck = sample_checkpoint()
        path = str(tmp_path / "x.ckpt")
        save_checkpoint(ck, path)
        back = load_checkpoint(path)
        assert back.config_text == ck.config_text
        assert back.stage_index == 1 and back.epoch == 42
        assert list(back.params) == list(ck.params)
        for name in ck.params:
            np.testing.assert_array_equal(back.params[name], ck.params[name])
            np.testing.assert_array_equal(back.velocities[name], ck.velocities[name])

    def test_save_is_byte_deterministic(self, tmp_path):
        ck = sample_checkpoint(1)
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(ck, p1)
        save_checkpoint(ck, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_to_store(self, tmp_path):
        ck = sample_checkpoint(2)
        store = ck.to_store()
        assert isinstance(store, ParamStore)
        assert store.peek("head.w").requires_grad
        np.testing.assert_array_equal(store.peek("head.w").data, ck.params["head.w"])


class TestRejection:
    def test_truncated(self, tmp_path):
        path = str(tmp_path / "x.ckpt")
        save_checkpoint(sample_checkpoint(), path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-20])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_wrong_magic(self, tmp_path):
        path = str(tmp_path / "junk")
        open(path, "wb").write(b"definitely not a checkpoint")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_unknown_version(self, tmp_path):
        path = str(tmp_path / "x.ckpt")
        save_checkpoint(sample_checkpoint(), path)
        raw = bytearray(open(path, "rb").read())
        raw[7:9] = (99).to_bytes(2, "little")
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        path = str(tmp_path / "x.ckpt")
        save_checkpoint(sample_checkpoint(), path)
        with open(path, "ab") as f:
            f.write(b"extra")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)
