"""Build with `cargo build --release -p pyvmfcl --features extension-module`,
then run this script from the repository root."""

import json
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))


def import_module():
    lib = os.path.join(ROOT, "target", "release", "libpyvmfcl.so")
    tmp = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(tmp, "pyvmfcl.so"))
    sys.path.insert(0, tmp)
    import pyvmfcl

    return pyvmfcl


def main():
    vm = import_module()

    u = vm.normalize([3.0, 4.0])
    assert abs(u[0] - 0.6) < 1e-15 and abs(u[1] - 0.8) < 1e-15

    # I_{1/2}(x) = sqrt(2 / (pi x)) sinh(x)
    x = 2.0
    expect = math.log(math.sqrt(2.0 / (math.pi * x)) * math.sinh(x))
    assert abs(vm.log_bessel_i(0.5, x) - expect) < 1e-12

    # kappa = 0 gives the uniform density on the circle
    assert abs(vm.vmf_log_density([1.0, 0.0], [0.0, 1.0], 0.0) + math.log(2 * math.pi)) < 1e-12

    bank = vm.ModelBank(3, 16.0)
    bank.add_class(0, [[1, 0, 0], [0, 1, 0]])
    bank.add_class(1, [[0, 0, 1]])
    assert bank.component_counts() == {0: 2, 1: 1}
    assert bank.predict([0.1, 0.9, 0.0]) == 0
    assert bank.predict([0.0, 0.2, 0.9]) == 1
    post = bank.class_posterior([0.3, 0.3, 0.3])
    assert abs(sum(p for _, p in post) - 1.0) < 1e-12
    comp = bank.component_posterior(0, [1.0, 0.1, 0.0])
    assert comp[0] > comp[1]

    try:
        vm.normalize([0.0, 0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("zero vector accepted")

    with tempfile.TemporaryDirectory() as d:
        ck = os.path.join(d, "bank.vmfb")
        bank.save(ck)
        back = vm.ModelBank.load(ck)
        assert back.component_counts() == bank.component_counts()
        assert abs(back.means(0)[1][1] - 1.0) < 1e-6

        conf = os.path.join(d, "tiny.conf")
        with open(conf, "w") as f:
            f.write(
                "[run]\nsplit = ND\nsessions = 2\n"
                "[synthetic]\nnum_classes = 2\ndomains_per_class = 2\ndim = 6\n"
                "train_per_pair = 30\ntest_per_pair = 8\nmin_separation_deg = 90\n"
                "[model]\nbackbone = identity\nfreeze_backbone = true\n"
                "[loss]\nepochs = 4\n[memory]\nbudget = 12\n"
            )
        report = json.loads(vm.run(conf, seed=3, out=os.path.join(d, "out")))
        assert report["complete"] and report["seed"] == 3
        assert len(report["per_session_acc"]) == 2
        trained = vm.ModelBank.load(os.path.join(d, "out", "session_1.vmfb"))
        v = trained.embed([1.0, 2.0, 0.0, 0.0, 0.0, 0.0])
        assert abs(sum(t * t for t in v) - 1.0) < 1e-12
        print("avg_inc_acc", round(report["avg_inc_acc"], 2), "components", trained.component_counts())

    print("smoke test ok")


if __name__ == "__main__":
    main()
