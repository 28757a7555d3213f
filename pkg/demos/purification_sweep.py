"""Reverse-SDE purification of benign and attacked inputs for DIRE.

Benign accuracy falls as t* grows; attacked accuracy rises from near zero
towards chance but does not recover clean performance.
"""
from recondetect.attacks import AttackConfig, pgd
from recondetect.defenses import PURIFY_RATIOS, purification_sweep
from recondetect.detectors import ClassifierTrainConfig, DetectorConfig, evaluate
from recondetect.scores import GeneratorSpec
from recondetect.world import WorldConfig, build_world

world = build_world(WorldConfig(dim=16, latent=4, ae_hidden=32, ae_iters=1500, n_per_class=300,
                                generators=[GeneratorSpec("shift", "analytic-shifted", offset=0.1)],
                                detector=DetectorConfig(steps=10), classifier=ClassifierTrainConfig(epochs=40)))
det, model = world.detector("DIRE", "shift"), world.models["shift"]
test = world.test_set("shift").take(50)
adv = pgd(det, test.x, test.y, AttackConfig(epsilon=0.031, steps=20, grad_mode="adjoint"), test.ids)

print(f"unpurified: benign {evaluate(det, test)['accuracy']:.2f}  "
      f"attacked {evaluate(det, (adv.x_adv, test.y))['accuracy']:.2f}")
benign = purification_sweep(test.x, test.y, PURIFY_RATIOS, det, model, world.schedule, ids=test.ids)
attacked = purification_sweep(adv.x_adv, test.y, PURIFY_RATIOS, det, model, world.schedule, ids=test.ids)
print(f"{'t*/T':>6} {'benign':>7} {'attacked':>9}")
for b, a in zip(benign, attacked):
    print(f"{b['ratio']:>6.2f} {b['accuracy']:>7.2f} {a['accuracy']:>9.2f}")
