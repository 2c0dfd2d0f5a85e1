"""Experiment harness: configuration, datasets, pipeline steps and the CLI."""

from .config import ENV_CONFIG, ExperimentConfig, RunManifest, load_config, parse_config_text, parse_region
from .dataset import DatasetManifest, ImageRecord, generate_synthetic, load_manifest, write_manifest
from .pipeline import (
    FeatureSource,
    analyze,
    detect_images,
    evaluate_records,
    extract_features,
    run_ablation_pair,
    run_config,
    train_model,
)
