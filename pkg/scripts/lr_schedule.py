"""Print where the step schedule drops the learning rate for a given run length.

    python scripts/lr_schedule.py --iterations 90000 --lr 1e-4
"""
import argparse

from camoseg.config import TrainConfig
from camoseg.train import lr_trace


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    args = p.parse_args()
    tc = TrainConfig(learning_rate=args.lr, iterations=args.iterations)
    trace = lr_trace(tc)
    print(f"iteration 0: lr {trace[0]:.3g}")
    for i in range(1, len(trace)):
        if trace[i] != trace[i - 1]:
            print(f"iteration {i}: lr {trace[i]:.3g}")


if __name__ == "__main__":
    main()
