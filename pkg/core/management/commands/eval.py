from pathlib import Path

from django.core.management.base import BaseCommand

from core.management.commands._runflags import command_errors, load_generator
from core.services import tensor as T
from core.services.metrics import build_extractor, evaluate, write_matrix_csv
from core.services.train import load_dataset


class Command(BaseCommand):
    help = "Compute proxy FID and IS of a checkpoint's generator against its dataset; prints `fid,is` as CSV."

    def add_arguments(self, parser):
        parser.add_argument("checkpoint")
        parser.add_argument("--dataset", choices=["synth", "cifar10"], help="Override the run's dataset.")
        parser.add_argument("--data-dir")
        parser.add_argument("--n-samples", type=int, help="Default: eval_samples of the run.")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--extractor", choices=["random_conv", "pixel_moments", "file"])
        parser.add_argument("--extractor-path")
        parser.add_argument("--dump-dir", help="Write real/fake features and posteriors as CSV matrices.")

    def handle(self, *args, **options):
        cfg, g = load_generator(options["checkpoint"])
        updates = {
            "dataset": options.get("dataset"),
            "data_dir": options.get("data_dir"),
            "extractor": options.get("extractor"),
            "extractor_path": options.get("extractor_path"),
        }
        n_samples = options.get("n_samples") or cfg.eval_samples
        seed = cfg.seed if options.get("seed") is None else options["seed"]

        with command_errors(), T.precision(cfg.dtype):
            cfg = cfg.updated({k: v for k, v in updates.items() if v is not None})
            dataset = load_dataset(cfg)
            extractor = build_extractor(
                cfg.extractor,
                seed=cfg.seed,
                feature_dim=cfg.feature_dim,
                num_classes=cfg.num_classes,
                path=cfg.extractor_path or None,
            )
            real_images = dataset.head(n_samples)
            real_features = extractor.features(real_images)
            result = evaluate(g, extractor, real_features, n_samples, seed)

            dump = options.get("dump_dir")
            if dump:
                dump = Path(dump)
                dump.mkdir(parents=True, exist_ok=True)
                write_matrix_csv(dump / "real_features.csv", real_features)
                write_matrix_csv(dump / "fake_features.csv", result.fake_features)
                write_matrix_csv(dump / "real_posteriors.csv", extractor.posteriors(features=real_features).probs)
                write_matrix_csv(dump / "fake_posteriors.csv", result.posteriors.probs)

        self.stdout.write("fid,is")
        self.stdout.write(f"{result.fid!r},{result.inception_score!r}")
