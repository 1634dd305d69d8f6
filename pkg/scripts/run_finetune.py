"""Pretrain on round lesions, fine-tune only the head on elongated lobed
lesions and compare AP@0.5 on the target test split."""
import sys

from _common import main

from melaseg.experiments import FinetuneExperiment, run_finetune

if __name__ == "__main__":
    sys.exit(main(__doc__, run_finetune, FinetuneExperiment, {"source_epochs": 2, "finetune_epochs": 2}))
