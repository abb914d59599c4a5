// SPDX-License-Identifier: Apache-2.0

//! `av3d expand`: rejection-sampled prototypes around a base bank.

use std::path::PathBuf;

use clap::Args;
use log::info;
use serde::Serialize;

use av3d_core::embedding::union_banks;
use av3d_core::fsse::{
    audit_outcome, fsse_expand, fsse_stats_report, FsseConfig, FsseStatsReport, RejectionCounts, SampleCount,
    DEFAULT_K_FRACTION, DEFAULT_MAX_ATTEMPTS, DEFAULT_THETA_MAX, DEFAULT_THETA_MIN,
};
use av3d_core::io::{read_bank, write_bank, write_json, BankFormat};

use super::{record_bank_input, record_bank_output, FormatArg};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct ExpandArgs {
    /// Base embedding bank (EMB1)
    #[arg(long)]
    pub base: PathBuf,
    /// Prototypes to add as a fraction of the base size (default 0.3)
    #[arg(long, conflicts_with = "k")]
    pub k_fraction: Option<f64>,
    /// Absolute number of prototypes to add
    #[arg(long)]
    pub k: Option<usize>,
    /// A candidate must be more similar than this to its reference
    #[arg(long, default_value_t = DEFAULT_THETA_MIN)]
    pub theta_min: f64,
    /// and less similar than this to every bank entry
    #[arg(long, default_value_t = DEFAULT_THETA_MAX)]
    pub theta_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ATTEMPTS)]
    pub max_attempts: u64,
    /// Output bank: the base entries followed by the new prototypes
    #[arg(long)]
    pub out: PathBuf,
    /// Write only the new prototypes to --out
    #[arg(long)]
    pub only_new: bool,
    #[arg(long, value_enum, default_value_t = FormatArg::Binary)]
    pub format: FormatArg,
    /// Report JSON to write
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ExpandReport<'a> {
    config: &'a FsseConfig,
    target: usize,
    accepted: usize,
    attempts: u64,
    rejections: RejectionCounts,
    acceptance_rate: f64,
    references: &'a [usize],
    audit_violations: usize,
    #[serde(flatten)]
    stats: FsseStatsReport,
}

pub fn run(args: &ExpandArgs, argv: &[String]) -> Result<()> {
    let count = match (args.k, args.k_fraction) {
        (Some(k), _) => SampleCount::Absolute(k),
        (None, f) => SampleCount::Fraction(f.unwrap_or(DEFAULT_K_FRACTION)),
    };
    let config = FsseConfig {
        count,
        theta_min: args.theta_min,
        theta_max: args.theta_max,
        seed: args.seed,
        max_attempts: args.max_attempts,
    };
    config.validate()?;

    let mut manifest = RunManifest::new("expand", argv);
    manifest.seed(args.seed);
    record_bank_input(&mut manifest, &args.base)?;
    let base = read_bank(&args.base)?;

    let target = config.target_count(base.len());
    let outcome = fsse_expand(&base, &config)?;
    info!(
        "accepted {} of {} prototypes in {} attempts",
        outcome.expanded.len(),
        target,
        outcome.attempts_used
    );
    let violations = audit_outcome(&base, &outcome, config.theta_min, config.theta_max);
    if !violations.is_empty() {
        return Err(CliError::internal(format!(
            "{} accepted prototypes fail the threshold audit (first: sample {})",
            violations.len(),
            violations[0].sample
        )));
    }
    let stats = fsse_stats_report(&base, &outcome.expanded)?;

    let format = BankFormat::from(args.format);
    let bank = if args.only_new {
        outcome.expanded.clone()
    } else {
        union_banks(&[&base, &outcome.expanded])?.bank
    };
    write_bank(&args.out, &bank, format)?;
    record_bank_output(&mut manifest, &args.out, format);

    if let Some(path) = &args.report {
        let report = ExpandReport {
            config: &config,
            target,
            accepted: outcome.expanded.len(),
            attempts: outcome.attempts_used,
            rejections: outcome.rejections,
            acceptance_rate: outcome.expanded.len() as f64 / outcome.attempts_used.max(1) as f64,
            references: &outcome.references,
            audit_violations: violations.len(),
            stats,
        };
        write_json(path, &report)?;
        manifest.output(path);
    }
    manifest.write(&RunManifest::path_for(&args.out))
}
