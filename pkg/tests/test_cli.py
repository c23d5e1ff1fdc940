"""Command-line orchestration: determinism, pipelines, exit codes."""
import hashlib
import json
from pathlib import Path

import pytest

from attmot.cli import main
from attmot.configfile import (
    ConfigError,
    dump_world_config,
    parse_config_text,
    world_config_from_mapping,
)
from attmot.synthgen import WorldConfig

WORLD_CFG = """attmot-config v1
n_sequences = 2
n_identities = 5
n_frames = 24
latent_dim = 32
seed = 9
"""


def tree_digest(root: Path) -> dict[str, str]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


@pytest.fixture()
def bench(tmp_path):
    cfg = tmp_path / "world.cfg"
    cfg.write_text(WORLD_CFG)
    out = tmp_path / "bench"
    assert main(["generate", "-c", str(cfg), "-o", str(out)]) == 0
    return out


class TestConfigFile:
    def test_header_required(self):
        with pytest.raises(ConfigError, match="header"):
            parse_config_text("n_frames = 5\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("attmot-config v1\na = 1\na = 2\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            world_config_from_mapping({"bogus": 1})

    def test_round_trip(self):
        cfg = WorldConfig(n_identities=7, seed=123)
        text = dump_world_config(cfg, 4)
        cfg2, n = world_config_from_mapping(parse_config_text(text))
        assert n == 4 and cfg2 == cfg

    def test_prior_keys(self):
        mapping = parse_config_text(
            "attmot-config v1\nprior.p_male = 0.25\nprior.body = 0.2,0.6,0.2\n")
        cfg, _ = world_config_from_mapping(mapping)
        assert cfg.prior.p_male == 0.25
        assert cfg.prior.body == (0.2, 0.6, 0.2)


class TestGenerate:
    def test_writes_expected_files(self, bench):
        assert sorted(p.name for p in bench.iterdir()) == ["seq-0000", "seq-0001", "world.cfg"]
        for seq in ("seq-0000", "seq-0001"):
            names = sorted(p.name for p in (bench / seq).iterdir())
            assert names == ["attrs.txt", "det.txt", "feats.csv", "gt.txt", "meta.jsonl"]

    def test_rerun_is_byte_identical(self, bench, tmp_path):
        cfg = tmp_path / "again.cfg"
        cfg.write_text(WORLD_CFG)
        out2 = tmp_path / "bench2"
        assert main(["generate", "-c", str(cfg), "-o", str(out2)]) == 0
        assert tree_digest(bench) == tree_digest(out2)

    def test_invalid_config_fails_before_writing(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("attmot-config v1\nn_frames = 0\n")
        out = tmp_path / "never"
        assert main(["generate", "-c", str(cfg), "-o", str(out)]) == 1
        assert not out.exists()

    def test_metadata_is_valid_jsonl(self, bench):
        lines = (bench / "seq-0000" / "meta.jsonl").read_text().strip().splitlines()
        assert len(lines) == 24
        row = json.loads(lines[3])
        assert row["frame"] == 4


class TestTrackEval:
    def test_pipeline(self, bench, tmp_path):
        runs = tmp_path / "runs"
        assert main(["track", "-b", str(bench), "--mode", "embed+attr",
                     "-o", str(runs)]) == 0
        assert sorted(p.name for p in runs.iterdir()) == ["seq-0000.txt", "seq-0001.txt"]
        report = tmp_path / "report.csv"
        assert main(["eval", "--gt", str(bench), "--res", str(runs),
                     "-o", str(report)]) == 0
        lines = report.read_text().strip().splitlines()
        assert len(lines) == 4  # header + 2 sequences + aggregate
        agg = lines[-1].split(",")
        assert agg[0] == "AGGREGATE"
        assert float(agg[1]) > 0.5  # MOTA on an easy benchmark

    def test_track_deterministic(self, bench, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["track", "-b", str(bench), "--mode", "embed", "-o", str(out)]) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_jobs_do_not_change_results(self, bench, tmp_path):
        a, b = tmp_path / "j1", tmp_path / "j3"
        assert main(["track", "-b", str(bench), "--mode", "embed", "-o", str(a)]) == 0
        assert main(["track", "-b", str(bench), "--mode", "embed", "-o", str(b),
                     "--jobs", "3"]) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_fusion_source_requires_params(self, bench, tmp_path):
        assert main(["track", "-b", str(bench), "--mode", "attr",
                     "--attr-source", "fusion", "-o", str(tmp_path / "x")]) == 1


class TestTrain:
    def test_train_writes_deterministic_artifacts(self, bench, tmp_path):
        out_a = tmp_path / "a.bin"
        out_b = tmp_path / "b.bin"
        for out, trace in ((out_a, tmp_path / "a.csv"), (out_b, tmp_path / "b.csv")):
            assert main(["train", "-b", str(bench), "--seed", "3", "-o", str(out),
                         "--crops", "300", "--iterations", "25",
                         "--trace", str(trace)]) == 0
        assert out_a.read_bytes() == out_b.read_bytes()
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
        header = (tmp_path / "a.csv").read_text().splitlines()[0]
        assert header == "iteration,bce,id_loss,total"

    def test_trained_head_tracks(self, bench, tmp_path):
        head = tmp_path / "head.bin"
        assert main(["train", "-b", str(bench), "--seed", "1", "-o", str(head),
                     "--crops", "300", "--iterations", "25"]) == 0
        out = tmp_path / "runs"
        assert main(["track", "-b", str(bench), "--mode", "embed+attr",
                     "--attr-source", "fusion", "--params", str(head),
                     "-o", str(out)]) == 0


class TestAblate:
    def _spec(self, tmp_path, bench, variants="embed,embed+attr", seeds="3"):
        spec = tmp_path / "spec.cfg"
        spec.write_text(
            f"attmot-config v1\nbenchmark = {bench}\nvariants = {variants}\n"
            f"seeds = {seeds}\n")
        return spec

    def test_matrix_report(self, bench, tmp_path):
        spec = self._spec(tmp_path, bench, seeds="3,4")
        out = tmp_path / "abl"
        assert main(["ablate", "-s", str(spec), "-o", str(out)]) == 0
        report = (out / "report.csv").read_text().strip().splitlines()
        assert report[0] == "variant,mota,fn,fp,ids,hota,assa,idr,idp,idf1,deta"
        assert report[1].startswith("embed,")
        assert report[2].startswith("embed+attr,")
        runs = {p.name for p in (out / "runs").iterdir()}
        assert runs == {"embed_seed3.csv", "embed_seed4.csv",
                        "embedPattr_seed3.csv", "embedPattr_seed4.csv"}

    def test_empty_variants_error(self, bench, tmp_path):
        spec = self._spec(tmp_path, bench, variants="")
        assert main(["ablate", "-s", str(spec), "-o", str(tmp_path / "x")]) == 1

    def test_reaggregation_from_run_csvs(self, bench, tmp_path):
        import statistics
        spec = self._spec(tmp_path, bench, variants="embed", seeds="3,4,5")
        out = tmp_path / "abl"
        assert main(["ablate", "-s", str(spec), "-o", str(out)]) == 0
        motas = []
        for seed in (3, 4, 5):
            rows = (out / "runs" / f"embed_seed{seed}.csv").read_text().strip().splitlines()
            agg = [r for r in rows if r.startswith("AGGREGATE,")][0]
            motas.append(float(agg.split(",")[1]))
        report = (out / "report.csv").read_text().strip().splitlines()[1].split(",")
        assert float(report[1]) == pytest.approx(statistics.median(motas), abs=1e-6)

    def test_single_variant_single_seed_equals_pipeline(self, bench, tmp_path):
        # the ablation path must reproduce the generate -> track -> eval
        # pipeline exactly for the same world seed
        spec = self._spec(tmp_path, bench, variants="embed", seeds="9")  # world seed
        out = tmp_path / "abl"
        assert main(["ablate", "-s", str(spec), "-o", str(out)]) == 0

        runs = tmp_path / "direct_runs"
        report = tmp_path / "direct.csv"
        assert main(["track", "-b", str(bench), "--mode", "embed", "-o", str(runs)]) == 0
        assert main(["eval", "--gt", str(bench), "--res", str(runs),
                     "-o", str(report)]) == 0

        ablate_rows = (out / "runs" / "embed_seed9.csv").read_text()
        assert ablate_rows == report.read_text()

    def test_idempotent(self, bench, tmp_path):
        spec = self._spec(tmp_path, bench, variants="embed", seeds="2")
        a, b = tmp_path / "o1", tmp_path / "o2"
        for out in (a, b):
            assert main(["ablate", "-s", str(spec), "-o", str(out)]) == 0
        assert tree_digest(a) == tree_digest(b)


class TestExitCodes:
    def test_usage_error(self):
        assert main(["track"]) == 1  # missing required args

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_missing_config(self, tmp_path):
        assert main(["generate", "-c", str(tmp_path / "nope.cfg"),
                     "-o", str(tmp_path / "x")]) == 1

    def test_runtime_failure_is_exit_2(self, bench, tmp_path):
        (bench / "seq-0000" / "det.txt").write_text("1,1,not,a,number,x,1\n")
        assert main(["track", "-b", str(bench), "--mode", "iou",
                     "-o", str(tmp_path / "x")]) == 2

    def test_verify_passes(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
