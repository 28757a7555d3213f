"""White-box collapse on a small world.

Trains the three detector kinds against one shifted generator, then compares
clean accuracy, accuracy under uniform noise and accuracy under PGD at the
same l-inf budget.
"""
from recondetect.attacks import AttackConfig, pgd, random_perturb
from recondetect.detectors import KINDS, ClassifierTrainConfig, DetectorConfig, evaluate
from recondetect.scores import GeneratorSpec
from recondetect.world import WorldConfig, build_world

EPS = 0.031

world = build_world(WorldConfig(dim=16, latent=4, ae_hidden=32, ae_iters=1500, n_per_class=300,
                                generators=[GeneratorSpec("shift", "analytic-shifted", offset=0.1)],
                                detector=DetectorConfig(steps=10), classifier=ClassifierTrainConfig(epochs=40)))
test = world.test_set("shift").take(50)

print(f"{'detector':<10} {'clean':>6} {'noise':>6} {'PGD':>6}")
for kind in KINDS:
    det = world.detector(kind, "shift")
    noisy = random_perturb(test.x, EPS, 0, test.ids, test.y)
    adv = pgd(det, test.x, test.y, AttackConfig(epsilon=EPS, steps=50), test.ids)
    accs = [evaluate(det, data)["accuracy"] for data in (test, (noisy.x_adv, test.y), (adv.x_adv, test.y))]
    print(f"{kind:<10} " + " ".join(f"{a:>6.2f}" for a in accs))
