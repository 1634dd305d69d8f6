import struct

import numpy as np
import pytest

from melaseg import checkpoint
from melaseg.checkpoint import CheckpointError
from melaseg.detector import DetectorConfig, build_detector
from melaseg.segmenter import SegConfig, build_segmenter


def test_layout_by_hand():
    blob = checkpoint.dumps({"w": np.array([[1.0, 2.0, 3.0]])})
    expect = b"FYS1" + struct.pack("<IH", 1, 1) + b"w" + struct.pack("<BII", 2, 1, 3) + struct.pack("<3f", 1, 2, 3)
    assert blob == expect


def test_round_trip_preserves_order_and_values():
    rng = np.random.default_rng(0)
    tensors = {"b": rng.normal(size=(4,)), "a": rng.normal(size=(2, 3, 1)), "s": np.float32(7.0)}
    back = checkpoint.loads(checkpoint.dumps(tensors))
    assert list(back) == ["b", "a", "s"]
    for k, v in tensors.items():
        np.testing.assert_array_equal(back[k], np.asarray(v, np.float32))


@pytest.mark.parametrize("blob", [b"NOPE\x00\x00\x00\x00", b"FYS1\x01\x00\x00\x00\x05\x00ab",
                                  b"FYS1\x01\x00\x00\x00\x01\x00w\x01\x09\x00\x00\x00\x00"])
def test_corrupt_rejected(blob):
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob)


def test_models_round_trip(tmp_path):
    cfg = DetectorConfig(S=2, B=2, C=1, anchors=((0.2, 0.2), (0.4, 0.4)), input_side=16)
    det = build_detector(cfg, ((4, 2), (4, 2), (4, 2)), seed=1, dtype=np.float32)
    checkpoint.save(tmp_path / "d.fys", det.state_dict())
    other = build_detector(cfg, ((4, 2), (4, 2), (4, 2)), seed=2, dtype=np.float32)
    other.load_state_dict(checkpoint.load(tmp_path / "d.fys"))
    x = np.random.default_rng(0).normal(size=(1, 3, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(det.forward(x), other.forward(x))
    seg = build_segmenter(SegConfig(height=8, width=8, channels=(2,)))
    assert checkpoint.loads(checkpoint.dumps(seg.state_dict())).keys() == seg.state_dict().keys()
