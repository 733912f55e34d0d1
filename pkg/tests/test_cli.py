import hashlib
import json

import numpy as np
import pytest
from click.testing import CliRunner

from refcolor import data as data_mod
from refcolor.cli import main


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    data_mod.build_dataset(4, out, deform=True, size=32, seed=1)
    return out


class TestBasics:
    def test_unknown_flag_exits_2(self, runner):
        result = runner.invoke(main, ["synth-data", "--n", "1", "--frobnicate"])
        assert result.exit_code == 2

    def test_unknown_subcommand_exits_2(self, runner):
        result = runner.invoke(main, ["transmogrify"])
        assert result.exit_code == 2

    def test_help_lists_subcommands(self, runner):
        result = runner.invoke(main, ["--help"])
        assert result.exit_code == 0
        for sub in ("synth-data", "train-autoencoder", "train-encoder",
                    "train-denoiser", "colorize", "manipulate", "probe", "serve"):
            assert sub in result.output


class TestSynthData:
    def test_zero_samples_empty_manifest(self, runner, tmp_path):
        result = runner.invoke(main, ["synth-data", "--n", "0", "--out",
                                      str(tmp_path / "d")])
        assert result.exit_code == 0, result.output
        header, records = data_mod.load_manifest(tmp_path / "d" / "manifest.jsonl")
        assert header["n"] == 0 and records == []
        sidecar = json.loads((tmp_path / "d" / "synth-data.config.json").read_text())
        assert sidecar["command"] == "synth-data"

    def test_operation_failure_exits_1_with_structured_message(self, runner, tmp_path):
        result = runner.invoke(main, ["synth-data", "--n", "-3", "--out",
                                      str(tmp_path / "x")])
        assert result.exit_code == 1
        payload = json.loads(result.output.strip().splitlines()[-1])
        assert payload["type"] == "ParameterError"


class TestColorize:
    def test_same_seed_identical_hashes(self, runner, pipeline_dir, cli_corpus, tmp_path):
        args = ["colorize",
                "--sketch", str(cli_corpus / "sketch_00000.png"),
                "--reference", str(cli_corpus / "ref_00001.png"),
                "--checkpoints", str(pipeline_dir),
                "--steps", "2", "--seed", "5"]
        hashes = []
        for name in ("o1.png", "o2.png"):
            result = runner.invoke(main, args + ["--out", str(tmp_path / name)])
            assert result.exit_code == 0, result.output
            hashes.append(hashlib.sha256((tmp_path / name).read_bytes()).hexdigest())
        assert hashes[0] == hashes[1]
        sidecar = json.loads((tmp_path / "o1.png.config.json").read_text())
        assert sidecar["sampler"]["seed"] == 5
        assert sidecar["sampler"]["steps"] == 2

    def test_manip_file_flag(self, runner, pipeline_dir, cli_corpus, tmp_path):
        from refcolor.manipulation import StepSpec, save_steps

        steps_path = tmp_path / "steps.json"
        save_steps(steps_path, [StepSpec(kind="global", target="red circle",
                                         target_scale=6.0)])
        result = runner.invoke(main, [
            "colorize", "--sketch", str(cli_corpus / "sketch_00000.png"),
            "--reference", str(cli_corpus / "ref_00001.png"),
            "--checkpoints", str(pipeline_dir), "--steps", "2", "--seed", "5",
            "--manip", str(steps_path), "--out", str(tmp_path / "manip.png")])
        assert result.exit_code == 0, result.output
        sidecar = json.loads((tmp_path / "manip.png.config.json").read_text())
        assert sidecar["manipulation_steps"][0]["target"] == "red circle"


class TestManipulate:
    def test_parity_with_engine(self, runner, pipeline_dir, cli_corpus, tmp_path):
        from refcolor.checkpointio import load_checkpoint
        from refcolor.manipulation import StepSpec, apply_steps, resolve_steps, save_steps
        from refcolor.tokens import load_token_model

        steps_path = tmp_path / "steps.json"
        specs = [StepSpec(kind="global", target="blue polygon", target_scale=5.0),
                 StepSpec(kind="local", target="green circle", control="green circle",
                          target_scale=4.0)]
        save_steps(steps_path, specs)
        out_path = tmp_path / "tokens.ckpt"
        result = runner.invoke(main, [
            "manipulate", "--reference", str(cli_corpus / "color_00002.png"),
            "--checkpoints", str(pipeline_dir), "--steps", str(steps_path),
            "--out", str(out_path)])
        assert result.exit_code == 0, result.output

        token_model = load_token_model(pipeline_dir / "token_model.ckpt")
        ref = data_mod.load_image(cli_corpus / "color_00002.png")
        expected = apply_steps(token_model.extract_tokens(ref),
                               resolve_steps(specs, token_model.embed_text))
        config, params = load_checkpoint(out_path)
        assert config["kind"] == "token_set"
        assert np.max(np.abs(params["cls"] - expected.cls.astype(np.float32))) < 1e-6
        assert np.max(np.abs(params["locals"]
                             - expected.locals.astype(np.float32))) < 1e-6
        # heatmap for the local step was rendered
        assert (tmp_path / "tokens_m1.png").exists()


class TestProbeCLI:
    def test_report_matches_direct_module_call(self, runner, pipeline_dir, cli_corpus,
                                               tmp_path):
        from refcolor.diagnostics import strategy_probe, write_probe_report
        from refcolor.sampler import SamplerConfig

        result = runner.invoke(main, [
            "probe", "--manifest", str(cli_corpus / "manifest.jsonl"),
            "--checkpoints", str(pipeline_dir), "--denoiser", "denoiser.ckpt",
            "--out", str(tmp_path / "cli_report"), "--n-samples", "2",
            "--steps", "2", "--seed", "0", "--gs", "2.0", "--sgs", "1.0"])
        assert result.exit_code == 0, result.output

        report = strategy_probe(["denoiser.ckpt"], cli_corpus / "manifest.jsonl",
                                pipeline_dir, cfg=SamplerConfig(steps=2, gs=2.0,
                                                                sgs=1.0, seed=0),
                                n_samples=2)
        write_probe_report(report, tmp_path / "direct_report")
        cli_csv = (tmp_path / "cli_report" / "probe_report.csv").read_bytes()
        direct_csv = (tmp_path / "direct_report" / "probe_report.csv").read_bytes()
        assert cli_csv == direct_csv

    def test_probe_renders_figure(self, runner, pipeline_dir, cli_corpus, tmp_path):
        result = runner.invoke(main, [
            "probe", "--manifest", str(cli_corpus / "manifest.jsonl"),
            "--checkpoints", str(pipeline_dir), "--denoiser", "denoiser.ckpt",
            "--out", str(tmp_path / "rep"), "--n-samples", "1", "--steps", "1"])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "rep" / "probe_report.png").stat().st_size > 0


class TestTrainCommands:
    def test_identity_autoencoder_checkpoint(self, runner, cli_corpus, tmp_path):
        out = tmp_path / "id.ckpt"
        result = runner.invoke(main, [
            "train-autoencoder", "--manifest", str(cli_corpus / "manifest.jsonl"),
            "--out", str(out), "--identity"])
        assert result.exit_code == 0, result.output
        from refcolor.autoencoder import IdentityAutoencoder, load_autoencoder

        assert isinstance(load_autoencoder(out), IdentityAutoencoder)

    def test_train_denoiser_smoke(self, runner, pipeline_dir, cli_corpus):
        result = runner.invoke(main, [
            "train-denoiser", "--manifest", str(cli_corpus / "manifest.jsonl"),
            "--checkpoints", str(pipeline_dir), "--strategy", "shuffle",
            "--noisy", "--epochs", "1", "--max-steps", "2", "--batch-size", "2",
            "--base", "16"])
        assert result.exit_code == 0, result.output
        final = pipeline_dir / "denoiser_shuffle-noisy-drop0.ckpt"
        assert final.exists()
        sidecar = json.loads(
            final.with_suffix(".ckpt.config.json").read_text())
        assert sidecar["command"] == "train-denoiser"
        assert sidecar["noisy"] is True
