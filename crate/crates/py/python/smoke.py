"""End-to-end smoke test of the `luq` extension module."""

import math
import os
import tempfile

import luq


def main():
    assert abs(luq.shannon_entropy([0.5, 0.5]) - math.log(2)) < 1e-12
    assert luq.kendall_distance([0, 1, 2], [2, 1, 0]) == 1.0
    assert abs(luq.avg_bitwidth([1.08] * 16 + [4.0] * 16) - 2.54) < 1e-12

    stack, calib, evals = luq.synth_workload(
        seed=0, ranks=[2, 2, 16, 16], hidden_dim=16, seq_len=16, pool_seqs=8, calib_seqs=8, eval_seqs=8
    )
    assert stack.num_layers == 4 and len(calib) == 8

    profile = luq.entropy_profile(stack, calib, k=20, seed=0)
    assert sorted(profile.order) == [0, 1, 2, 3]
    assert luq.EntropyProfile.from_json(profile.to_json()).order == profile.order

    config = luq.QuantConfig()
    plan = luq.QuantPlan(profile, 2, config)
    assert plan.methods().count("bin") == 2
    assert luq.QuantPlan.from_json(plan.to_json()).to_json() == plan.to_json()

    quantized, bits = luq.quantize(stack, plan, calib, config)
    assert quantized.tags().count("bin") == 2
    assert 1.0 < bits < 4.0

    fp = luq.evaluate(stack, evals)
    q = luq.evaluate(quantized, evals)
    assert 0.0 <= q <= 1.0 and 0.0 <= fp <= 1.0
    assert luq.perplexity(quantized, evals) >= 1.0

    greedy, _ = luq.threshold_select(stack, profile, calib, evals, tau=-1.0)
    binary, _ = luq.threshold_select(stack, profile, calib, evals, tau=-1.0, search="binary")
    assert greedy.k == binary.k == 4

    try:
        luq.budget_select(stack, profile, budget_bytes=1.0)
    except ValueError as e:
        assert "budget infeasible" in str(e)
    else:
        raise AssertionError("expected an infeasible budget")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "q.luqc")
        quantized.save(path)
        again = luq.LayerStack.load(path)
        assert again.tags() == quantized.tags()
        assert again.logits([1, 2, 3]) == quantized.logits([1, 2, 3])
        try:
            luq.LayerStack.load(os.path.join(d, "missing.luqc"))
        except OSError as e:
            assert "missing.luqc" in str(e)

    print(f"luq {luq.__version__}: fp {fp:.4f}, k=2 at {bits:.3f} bits {q:.4f}; smoke ok")


if __name__ == "__main__":
    main()
