"""Train the toy detector on 300 synthetic images, report AP@0.5 and the
localization-correct fraction on the 100 held-out ones."""
import sys

from _common import main

from melaseg.experiments import DetectionExperiment, run_detection

if __name__ == "__main__":
    sys.exit(main(__doc__, run_detection, DetectionExperiment, {"epochs": 3}))
