/// Self-contained matplotlib script written next to the run artifacts.
pub const PLOT_SCRIPT: &str = r##"#!/usr/bin/env python3
"""Orbit projections with the D-minimizer cloud, and the continuation branch.

Run from anywhere; reads the CSV and orbit files stored beside this script and
writes orbits.png and branch.png into the same directory.
"""
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))


def load(name, usecols=None):
    path = os.path.join(HERE, name)
    if not os.path.exists(path):
        return None
    return np.loadtxt(path, delimiter=",", comments="#", ndmin=2, usecols=usecols)


cloud = load("cloud.csv")  # a_1..a_n, D, |grad D|
controlled = load("controlled.orbit")
final = load("final.orbit")
traj = load("controlled_trajectory.csv")  # t, a_1..a_n

ref = final if final is not None else controlled
n = ref.shape[1]
pairs = [(0, 1)] if n == 2 else [(0, 1), (0, 2), (1, 2)]

fig, axes = plt.subplots(1, len(pairs), figsize=(5 * len(pairs), 4.5), squeeze=False)
for ax, (i, j) in zip(axes[0], pairs):
    if traj is not None:
        ax.plot(traj[:, 1 + i], traj[:, 1 + j], color="0.8", lw=0.3, label="controlled trajectory")
    for orb, style, label in [(controlled, "--", "controlled orbit"), (final, "-", "k = 0 orbit")]:
        if orb is not None:
            loop = np.vstack([orb, orb[:1]])
            ax.plot(loop[:, i], loop[:, j], style, lw=1.2, label=label)
    if cloud is not None:
        ax.scatter(cloud[:, i], cloud[:, j], s=8, c="tab:red", zorder=3, label="D minimizers")
    ax.set_xlabel(f"a{i + 1}")
    ax.set_ylabel(f"a{j + 1}")
axes[0][0].legend(loc="best", fontsize=8)
fig.tight_layout()
fig.savefig(os.path.join(HERE, "orbits.png"), dpi=150)

branch = load(os.path.join("branch", "branch.csv"), usecols=(0, 1, 2))
if branch is not None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(branch[:, 0], branch[:, 1], "o-")
    ax.set_xlabel("k")
    ax.set_ylabel("period T")
    fig.tight_layout()
    fig.savefig(os.path.join(HERE, "branch.png"), dpi=150)
"##;
