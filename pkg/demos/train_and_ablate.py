"""Short training run followed by the A0-A7 ablation table.

Trains at reduced scale (small nets, few updates), then evaluates every
ablation row at payload 0.4 kg under nominal and 5x friction.  Pass
--episodes to train longer; the defaults finish in well under a minute.
"""
import argparse
import tempfile

from lyapshield import bench as bn
from lyapshield import trainloop as tl

ap = argparse.ArgumentParser()
ap.add_argument("--episodes", type=int, default=6)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

cfg = tl.TrainConfig(episodes=args.episodes, seed=args.seed, T=2.0, warmup_episodes=2, hidden=64,
                     cert_width=32, pinn_width=32, sac_updates=20, cert_updates=5, pinn_updates=20,
                     warmstart_steps=500, batch=64)
with tempfile.TemporaryDirectory() as out:
    res = tl.run_training(cfg, out)
for rec in res.metrics[1:]:
    print(f"episode {rec['episode']:>2}  payload {rec['payload']:.2f}  rmse {rec['rmse']:.4f}  "
          f"mu {rec['mu']:.4f}  shield {rec['shield_frac']:.2f}")

L = res.learners
table = bn.ablation_matrix(res.setup, L.agent, L.cert, L.model, seeds=(0, 1), T=2.0)
print("\nconfig  label                         rmse x1   rmse x5")
for row in table["rows"]:
    print(f"{row['config']:<6}  {row['label']:<28}  {row['rmse_f1']:.4f}    {row['rmse_f5']:.4f}")
print("identities:", table["identities"])
