"""Train every (method, map) pair with the desk-scale presets and print the success table.

    python scripts/run_table.py --envs mini_four_rooms mini_point_maze --out runs/table
"""

import argparse
import logging

from ldsc.harness import preset, run_experiment, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--envs", nargs="+", default=["mini_four_rooms", "mini_point_maze"])
    ap.add_argument("--methods", nargs="+", default=["LDSC", "DSC", "DDPG"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--episodes", type=int, default=300)
    ap.add_argument("--window", type=int, default=20)
    ap.add_argument("--out", default="runs/table")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    run_dirs = []
    for env in args.envs:
        for method in args.methods:
            cfg = preset(env, method, seeds=args.seeds, episodes=args.episodes, output_dir=args.out)
            logging.info("training %s on %s (%d seeds x %d episodes)", method, env, len(args.seeds), args.episodes)
            run_dirs.append(run_experiment(cfg))
    for row in summarize(run_dirs, args.window):
        print(row.line())


if __name__ == "__main__":
    main()
