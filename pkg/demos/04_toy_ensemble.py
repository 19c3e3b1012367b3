"""Train both toy networks and score them alone and as an ensemble.

This is the whole pipeline at 32x32 on the synthetic fixture. Pass
``--epochs`` to shorten the run; 30 epochs takes well under a minute.
"""
import argparse

import numpy as np

from adensemble import architectures as A
from adensemble import data as D
from adensemble import evaluation as E
from adensemble import trainer as TR

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--epochs", type=int, default=30)
args = parser.parse_args()

prepared = D.prepare(D.make_toy_dataset(), size=32, scenario="no-smote")
train, val, (Xte, Yte) = (prepared.subset(p) for p in ("train", "val", "test"))
y_true = D.as_labels(Yte)
print("train/val/test:", len(train[0]), len(val[0]), len(Xte))

cfg = TR.TrainConfig(learning_rate=1e-3, batch_size=8, epochs=args.epochs)
probs = {}
for name, build in (("IR-BRAINNET", A.build_toy_ir_brainnet),
                    ("Modified-DEMNET", A.build_toy_modified_demnet)):
    g = A.kaiming_init(build(), seed=0)
    g, hist = TR.fit(g, train, val, cfg)
    probs[name] = A.predict(g, Xte)
    print(f"{name:16s} final val loss {hist.rows[-1]['val_loss']:.4f}")

probs["Ensemble"] = E.ensemble_average(list(probs.values())).probs
print()
for name, p in probs.items():
    rep = E.evaluate_predictions(p, y_true, name, prepared.class_names)
    print(f"{name:16s} accuracy {rep.summary['accuracy']:.4f}  AUC {rep.auc:.4f}")

print("\nensemble confusion matrix (rows true, columns predicted):")
print(E.confusion(y_true, probs["Ensemble"].argmax(1)))

correct = {n: (p.argmax(1) == y_true).astype(float) for n, p in probs.items()}
for member in ("IR-BRAINNET", "Modified-DEMNET"):
    try:
        w, p = E.wilcoxon_signed_rank(correct["Ensemble"], correct[member])
        print(f"Wilcoxon ensemble vs {member}: W={w}, p={p:.4f}")
    except E.DegenerateTestError as exc:
        print(f"Wilcoxon ensemble vs {member}: not computed ({exc})")
