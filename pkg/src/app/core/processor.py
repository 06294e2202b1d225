import json
import logging
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from ..config import Config, ModelConfig, RunConfig
from ..exceptions import ContractError, DataError, ModeMismatchError, StorageError
from ..schema.schemas import (
    AblationRow,
    Mode,
    Report,
    RunManifest,
    TimingRow,
)
from ..services import datapipe, metrics, stegsynth
from ..services.genmode import PromptTemplate
from ..services.gradcheck import GradcheckResult, assert_gradcheck, run_gradcheck
from ..services.trainer import benchmark_modes, build_detector_model, evaluate, pretrain_base, train
from .checkpoint import load_checkpoint, save_checkpoint
from .lora import trainable_param_count, validate_rank
from .model import TransformerLM

logging.basicConfig(
    level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
BASE_CHECKPOINT = "base.ckpt"


def _write_json(path: Path, payload) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"Could not write {path}: {e}") from e
    return path


def _ablation_job(job: Dict) -> Dict:
    """Train and test one (preset, r, mode) cell; runs in a worker process."""
    config = RunConfig.model_validate(job["config"])
    mode = Mode(job["mode"])
    base = load_checkpoint(job["base"])
    splits = datapipe.read_splits(job["splits"])
    model = build_detector_model(base, mode, config)
    result = train(model, splits["train"], splits["val"], config)
    scored = evaluate(result.model, splits["test"], mode, config)
    row = AblationRow(preset=job["preset"], r=config.lora.r, mode=mode, accuracy=scored.accuracy,
                      f1=scored.f1, trainable_params=trainable_param_count(result.model))
    return row.model_dump(mode="json")


class LsgcProcessor:
    def __init__(self, config: RunConfig, out_dir=None, seed: Optional[int] = None,
                 config_path: Optional[str] = None):
        """
        Initialize the steganalysis pipeline.

        Args:
            config: Validated run configuration
            out_dir: Artifact directory, defaults to LSGC_OUTPUT_DIR
            seed: Overrides every seeded section of the config
            config_path: Config file the run came from, for the manifest
        """
        self.config = config.with_seed(seed) if seed is not None else config
        self.seed = self.config.train.seed
        self.out_dir = Path(out_dir or Config.OUTPUT_DIR)
        self.config_path = config_path

    @contextmanager
    def _manifest(self, command: str, directory: Optional[Path] = None, **arguments):
        manifest = RunManifest(
            command=command,
            config_path=self.config_path,
            seed=self.seed,
            build_id=Config.BUILD_ID,
            output_dir=str(directory or self.out_dir),
            started_at=datetime.now(timezone.utc),
            arguments={k: str(v) for k, v in arguments.items() if v is not None},
            config_hash=self.config.config_hash(),
        )
        path = Path(manifest.output_dir) / MANIFEST_FILE
        _write_json(path, manifest.model_dump(mode="json"))
        yield manifest
        manifest.finished_at = datetime.now(timezone.utc)
        _write_json(path, manifest.model_dump(mode="json"))

    def _stamp(self, manifest: RunManifest, directory: Path, seed: Optional[int] = None, **arguments) -> Path:
        """Give an artifact subdirectory its own manifest naming the command that filled it."""
        stamp = manifest.model_copy(update={
            "output_dir": str(directory),
            "seed": manifest.seed if seed is None else seed,
            "arguments": {**manifest.arguments, **{k: str(v) for k, v in arguments.items()}},
            "finished_at": datetime.now(timezone.utc),
        })
        return _write_json(directory / MANIFEST_FILE, stamp.model_dump(mode="json"))

    def _report(self, title: str, **rows) -> Report:
        return Report(title=title, seed=self.seed, config_hash=self.config.config_hash(), **rows)

    # Corpus

    def synthesize(self) -> Dict[str, int]:
        """
        Write cover and stego corpora for every configured dial.

        Returns:
            Record count per corpus file stem
        """
        with self._manifest("synth", self.out_dir / "corpus"):
            cfg = self.config.synth
            synthesizer = stegsynth.CorpusSynthesizer.from_seed_corpus(cfg)
            corpora = synthesizer.corpora()
            corpus_dir = self.out_dir / "corpus"
            summary = {}
            covers = corpora["cover"]
            for name, examples in corpora.items():
                datapipe.write_corpus(corpus_dir / f"{name}.jsonl", examples,
                                      header=f"seed={cfg.seed} source={name}")
                entry = {"records": len(examples)}
                if name != "cover" and examples:
                    entry["mean_bpw"] = round(sum(e.bpw for e in examples) / len(examples), 6)
                    entry["kl_to_cover"] = round(stegsynth.byte_kl_divergence(
                        [e.text for e in examples], [e.text for e in covers]), 6)
                summary[name] = entry
                logger.info(f"Wrote {len(examples)} records to {name}.jsonl")
            _write_json(corpus_dir / "synth_stats.json", summary)
            return {name: entry["records"] for name, entry in summary.items()}

    def prepare(self, corpus_dir) -> Dict[str, Dict[str, int]]:
        """Filter, balance and split cover against each stego corpus."""
        corpus_dir = Path(corpus_dir)
        with self._manifest("prepare", self.out_dir / "splits", corpus=corpus_dir) as manifest:
            covers = datapipe.read_corpus(corpus_dir / "cover.jsonl")
            stego_files = sorted(p for p in corpus_dir.glob("*.jsonl") if p.stem != "cover")
            if not stego_files:
                raise DataError(f"No stego corpora in {corpus_dir}")
            sizes = {}
            for path in stego_files:
                splits, rejected = datapipe.prepare_dataset(
                    covers, datapipe.read_corpus(path), self.config.filter, self.config.split)
                split_dir = self.out_dir / "splits" / path.stem
                datapipe.write_splits(split_dir, splits, self.config.split)
                _write_json(split_dir / "rejected.json", [r.model_dump() for r in rejected])
                self._stamp(manifest, split_dir, dataset=path.stem)
                sizes[path.stem] = {name: len(part) for name, part in zip(datapipe.SPLIT_NAMES, splits)}
                logger.info(f"Prepared {path.stem}: {sizes[path.stem]}")
            return sizes

    # Models

    def base_model(self, model_config: Optional[ModelConfig] = None) -> TransformerLM:
        """Load the configured base checkpoint or pretrain one on the seed corpus."""
        path = self.config.paths.base_checkpoint
        if path and model_config is None:
            base = load_checkpoint(path)
            if base.adapters or base.has_classifier_head:
                raise ContractError(f"{path} is not a plain base model")
            return base
        base = TransformerLM(model_config or self.config.model, seed=self.config.pretrain.seed)
        text = stegsynth.load_seed_corpus()
        losses = pretrain_base(base, text, self.config.pretrain)
        if losses:
            logger.info(f"Pretrained base for {len(losses)} steps, final loss {losses[-1]:.4f}")
        return base

    def pretrain(self) -> Path:
        with self._manifest("pretrain"):
            base = self.base_model(self.config.model)
            return save_checkpoint(base, self.out_dir / BASE_CHECKPOINT)

    def _template(self) -> PromptTemplate:
        return PromptTemplate.from_settings(self.config.generation)

    def train(self, splits_root, mode: Optional[Mode] = None, repeats: Optional[int] = None) -> Report:
        """
        Train and test one detector per dataset, repeated over consecutive seeds.

        Writes a checkpoint and stats file per run and a report for the whole command.
        """
        mode = mode or self.config.train.mode
        repeats = repeats or self.config.train.repeats
        with self._manifest("train", splits=splits_root, mode=mode.value, repeats=repeats) as manifest:
            datasets = datapipe.find_split_dirs(splits_root)
            base = self.base_model()
            template = self._template()
            rows, timings = [], []
            for dataset, split_dir in datasets.items():
                splits = datapipe.read_splits(split_dir)
                results = []
                for offset in range(repeats):
                    seed = self.seed + offset
                    config = self.config.with_seed(seed).with_mode(mode)
                    model = build_detector_model(base, mode, config)
                    run = train(model, splits["train"], splits["val"], config, template)
                    test = evaluate(run.model, splits["test"], mode, config, template)
                    run.stats.final_confusion = test.confusion
                    run.stats.parse_rate = test.parse_rate
                    run_dir = self.out_dir / dataset / f"{mode.short}-seed{seed}"
                    save_checkpoint(run.model, run_dir / "model.ckpt")
                    _write_json(run_dir / "stats.json", {
                        "train": run.stats.model_dump(mode="json"),
                        "test": test.model_dump(mode="json", exclude={"predictions"}),
                    })
                    self._stamp(manifest, run_dir, seed=seed, dataset=dataset)
                    results.append(test)
                    timings.append(TimingRow(label=f"{dataset}/{mode.short}/seed{seed}",
                                             seconds=run.stats.total_seconds))
                    logger.info(f"{dataset} seed {seed}: test acc {metrics.format_pct(test.accuracy)}, "
                                f"F1 {metrics.format_pct(test.f1)}, parse rate {test.parse_rate:.3f}")
                if repeats > 1:
                    rows.append(metrics.seed_row(dataset, mode, results))
                else:
                    rows.append(metrics.metric_row(dataset, results[0]))
            report = self._report(f"Detection results ({mode.value} mode)", metrics=rows, timings=timings)
            metrics.emit_report(report, self.out_dir, "report")
            return report

    def evaluate(self, checkpoint, splits_root, split: str = "test", mode: Optional[Mode] = None) -> Report:
        with self._manifest("eval", checkpoint=checkpoint, splits=splits_root, split=split):
            if split not in datapipe.SPLIT_NAMES:
                raise DataError(f"Unknown split '{split}', choose from {list(datapipe.SPLIT_NAMES)}")
            model = load_checkpoint(checkpoint)
            if mode is not None and mode is not model.mode:
                raise ModeMismatchError(
                    f"Checkpoint {checkpoint} is a {model.mode.value} model, not {mode.value}")
            rows = []
            for dataset, split_dir in datapipe.find_split_dirs(splits_root).items():
                examples = datapipe.read_splits(split_dir)[split]
                result = evaluate(model, examples, model.mode, self.config, self._template())
                rows.append(metrics.metric_row(dataset, result))
            report = self._report(f"Evaluation on {split}", metrics=rows,
                                  notes={"checkpoint": str(checkpoint)})
            metrics.emit_report(report, self.out_dir, "eval_report")
            return report

    def bench(self, splits_root) -> Report:
        """Time both training modes on the first prepared dataset."""
        with self._manifest("bench", splits=splits_root):
            dataset, split_dir = next(iter(datapipe.find_split_dirs(splits_root).items()))
            train_set = datapipe.read_splits(split_dir)["train"]
            base = self.base_model()
            benchmark, gen, cls = benchmark_modes(base, train_set, self.config, self._template())
            report = self._report(
                "Training time by mode",
                benchmark=benchmark,
                timings=[TimingRow(label="LSGC-G (this run)", seconds=gen.total_seconds),
                         TimingRow(label="LSGC-C (this run)", seconds=cls.total_seconds)],
                reference_timings=metrics.reference_timings(),
                notes={"dataset": dataset},
            )
            metrics.emit_report(report, self.out_dir, "bench_report")
            logger.info(f"Reduction: {metrics.format_pct(benchmark.reduction)}%")
            return report

    def ablate_r(self, splits_root, r_values: Optional[Sequence[int]] = None) -> Report:
        """Train and test every (preset, r, mode) cell on the first prepared dataset."""
        ablation = self.config.ablation
        r_values = list(r_values or ablation.r_values)
        with self._manifest("ablate-r", splits=splits_root, r=",".join(map(str, r_values))) as manifest:
            presets = {name: ModelConfig.preset(name, dropout=self.config.model.dropout)
                       for name in ablation.presets}
            for model_config in presets.values():
                for r in r_values:
                    validate_rank(model_config, self.config.lora.model_copy(update={"r": r}))

            dataset, split_dir = next(iter(datapipe.find_split_dirs(splits_root).items()))
            jobs = []
            for name, model_config in presets.items():
                base_path = save_checkpoint(self.base_model(model_config),
                                            self.out_dir / "ablation" / f"base-{name}.ckpt")
                for r in r_values:
                    config = self.config.model_copy(update={
                        "model": model_config,
                        "lora": self.config.lora.model_copy(update={"r": r, "lora_alpha": 2.0 * r}),
                    })
                    for mode in ablation.modes:
                        jobs.append({"config": config.with_mode(mode).model_dump(mode="json"),
                                     "mode": mode.value, "preset": name, "base": str(base_path),
                                     "splits": str(split_dir)})

            self._stamp(manifest, self.out_dir / "ablation")
            logger.info(f"Running {len(jobs)} ablation cells with {Config.THREADS} worker(s)")
            if Config.THREADS > 1:
                with ProcessPoolExecutor(max_workers=Config.THREADS) as pool:
                    cells = list(pool.map(_ablation_job, jobs))
            else:
                cells = [_ablation_job(job) for job in jobs]

            report = self._report("LoRA rank ablation", ablation=[AblationRow(**cell) for cell in cells],
                                  notes={"dataset": dataset})
            metrics.emit_report(report, self.out_dir, "ablation_report")
            return report

    def gradcheck(self) -> List[GradcheckResult]:
        with self._manifest("gradcheck"):
            results = run_gradcheck(self.seed)
            _write_json(self.out_dir / "gradcheck.json", [r.model_dump() for r in results])
            assert_gradcheck(results)
            return results

    def report(self, run_dirs: Sequence) -> Report:
        """Merge the reports found in several run directories."""
        with self._manifest("report", runs=",".join(str(d) for d in run_dirs)):
            paths = []
            for run_dir in map(Path, run_dirs):
                paths.extend(sorted(run_dir.glob("*report.json")))
            if not paths:
                raise DataError("No report files found in the given run directories")
            merged = metrics.merge_reports([metrics.load_report(p) for p in paths], seed=self.seed)
            metrics.emit_report(merged, self.out_dir, "merged_report")
            return merged

