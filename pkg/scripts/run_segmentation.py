"""Train the two-stage segmenter on lesion crops twice (MFB-weighted and
unweighted) and report per-image metrics on the held-out images."""
import sys

from _common import main

from melaseg.experiments import SegmentationExperiment, run_segmentation
from melaseg.segmenter import SegConfig


def quick_seg():
    return SegConfig(height=32, width=32, channels=(16, 32), epochs=2, batch_size=16, lr=2e-3)


if __name__ == "__main__":
    sys.exit(main(__doc__, run_segmentation, SegmentationExperiment, {"seg": quick_seg()}))
