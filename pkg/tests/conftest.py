import pytest

from fisor_lab.config import RunConfig

TINY = [
    "data.n_scripted=1500", "data.n_random=1500",
    "critic.hidden=[16,16]", "critic.steps=30", "critic.batch_size=64", "critic.log_every=10",
    "diffusion.hidden=[16,16]", "diffusion.steps=20", "diffusion.batch_size=64", "diffusion.log_every=10",
    "eval.episodes=4", "eval.n_candidates=4",
]


def tiny_config(*extra) -> RunConfig:
    return RunConfig().with_overrides(TINY + list(extra))


@pytest.fixture
def tiny_cfg():
    return tiny_config()


# --- acceptance summary -----------------------------------------------------------

ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"C{k} {'PASS' if ok else 'FAIL'}  {detail}")
