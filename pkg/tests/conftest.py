import numpy as np
import pytest

from dephn.assembly import DEPHN, MMoELite, build_model
from dephn.data import DatasetSpec, generate_dataset
from dephn.features import FieldSchema

TINY_CARDS = (4, 5, 3)
TINY_MODEL_KW = dict(expert_dim=3, depth=1, dnn_widths=(4,), heads=2)


@pytest.fixture
def tiny_schema():
    return FieldSchema(TINY_CARDS, embed_dim=4)


def tiny_batch(n=16, seed=0, n_tasks=2):
    rng = np.random.default_rng(seed)
    X = np.stack([rng.integers(0, c, size=n) for c in TINY_CARDS], axis=1)
    Y = rng.integers(0, 2, size=(n, n_tasks))
    Y[0], Y[1] = 0, 1  # both classes in every task
    return X, Y


def jitter_parameters(model, seed=0, scale=0.3):
    """Move zero-initialized biases, scales and gates off zero so every path carries gradient."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        if not np.any(p.value):
            p.value[...] = rng.normal(0.0, scale, size=p.shape)


def tiny_model(name, schema, n_tasks=2, seed=0, **kw):
    model = build_model(name, schema, n_tasks, seed=seed, **{**TINY_MODEL_KW, **kw})
    jitter_parameters(model, seed)
    return model


def copy_values(dst_params, src_params):
    assert len(dst_params) == len(src_params)
    for d, s in zip(dst_params, src_params):
        assert d.shape == s.shape
        d.value[...] = s.value


def matched_mmoe_pair(schema, n_tasks=2, n_experts=3, seed=0):
    """A P=1 / raw-mapping / softmax-gated DEPHN wired to reproduce an MMoE-lite."""
    mmoe = MMoELite(schema, n_tasks, seed=seed, n_experts=n_experts, expert_dim=5, dnn_widths=(6,))
    dephn = DEPHN(
        schema,
        n_tasks,
        seed=seed + 1,
        public_kinds=("dnn",) * n_experts,
        private_kinds=(),
        mappings=("rm",),
        gating="mg",
        expert_dim=5,
        dnn_widths=(6,),
        use_ssg=False,
    )
    jitter_parameters(mmoe, seed)
    copy_values(dephn.features.embedding.parameters(), mmoe.features.embedding.parameters())
    for mine, theirs in zip(dephn.bank.public, mmoe.experts):
        copy_values(mine.parameters(), theirs.parameters())
    for t in range(n_tasks):
        copy_values(dephn.gates.linear[t].parameters(), mmoe.gates[t].parameters())
        final = mmoe.towers[t].layers[-1]
        tower = dephn.towers[t]
        tower.w_pub.value[...] = final.weight.value[:, 0][None, None, :]
        tower.b_pub.value[...] = final.bias.value
        tower.b_pri.value[...] = 0.0
    return dephn, mmoe


@pytest.fixture(scope="session")
def small_related():
    return generate_dataset(DatasetSpec(n_samples=4000, variant="related", seed=3))


@pytest.fixture(scope="session")
def small_unrelated():
    return generate_dataset(DatasetSpec(n_samples=3000, variant="unrelated", seed=5))


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion; the suite prints them at the end."""

    def record(number, title, ok, detail):
        _ACCEPTANCE[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(_ACCEPTANCE[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
