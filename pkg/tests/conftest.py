from pathlib import Path

import pytest

from lde.cli import main

SMALL_GEN = ["--set", "gen.ids_per_domain=4", "--set", "gen.images_per_id=6", "--set", "gen.height=32",
             "--set", "gen.width=32", "--set", "gen.num_domains=4"]
SMALL_TRAIN = ["--set", "train.widths=[4,4,6,6]", "--set", "train.stem_width=4", "--set", "train.stem_stride=1",
               "--set", "train.reduction=2", "--set", "train.P=2", "--set", "train.K_inst=2"]


def run_pipeline(root: Path, seed: int = 7, iterations: int = 3) -> Path:
    """gen -> split -> train -> embed x2 -> eval on a tiny dataset; returns the eval directory."""
    seed_args = ["--seed", str(seed)]
    steps = [
        ["gen", "--out", str(root / "data"), *seed_args, *SMALL_GEN],
        ["split", str(root / "data" / "manifest.jsonl"), "--protocol", "open_scene", "--out", str(root / "split"),
         *seed_args, "--set", "split.test_scenes=[6,7]"],
        ["train", str(root / "split"), "--out", str(root / "run"), "--iterations", str(iterations), *seed_args,
         *SMALL_TRAIN],
        ["embed", str(root / "run" / "model.ckpt"), str(root / "split" / "query.jsonl"), "--out",
         str(root / "emb_q")],
        ["embed", str(root / "run" / "model.ckpt"), str(root / "split" / "gallery.jsonl"), "--out",
         str(root / "emb_g")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    merged = root / "embeddings.jsonl"
    merged.write_bytes((root / "emb_q" / "embeddings.jsonl").read_bytes() +
                       (root / "emb_g" / "embeddings.jsonl").read_bytes())
    assert main(["eval", str(merged), str(root / "split" / "query.jsonl"), str(root / "split" / "gallery.jsonl"),
                 "--out", str(root / "eval")]) == 0
    return root / "eval"


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    run_pipeline(root)
    return root


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_line(request):
    """Record one PASS/FAIL line; all lines are echoed live and again in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, passed: bool, text: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {text}"
        lines.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
