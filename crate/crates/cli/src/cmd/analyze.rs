use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::Deserialize;
use stream_trace::analytics::{
    category_means, kurtosis_csv, profiles_csv, rank_receiver_heads, vertical_profile,
    ProfileInput, ProfileSource, VerticalProfile,
};
use stream_trace::block_grid::block_mean;
use stream_trace::causal_block_mask;
use stream_trace::oracle::{dense_scores, dense_softmax};

use crate::util::{self, WithCode, DATA, USAGE};
use crate::{BlockArgs, HeadArgs, RunArg};

#[derive(Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    run: RunArg,
    /// Mask directory written by `estimate` (needed for mask_* profiles).
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Comma-separated profile sources: block_mean, mask_frequency, mask_score.
    #[arg(long, value_delimiter = ',', default_value = "mask_frequency")]
    profiles: Vec<ProfileSource>,
    /// CSV with `block_index,label` rows; adds per-category means.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    blocks: BlockArgs,
    /// Dense limit for block_mean profiles [default: $STREAM_MAX_DENSE_T or 4096].
    #[arg(long = "max-T")]
    max_t: Option<usize>,
    #[command(flatten)]
    select: HeadArgs,
    /// Output directory [default: <run>/analysis].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct LabelRow {
    block_index: usize,
    label: String,
}

fn read_labels(path: &PathBuf) -> anyhow::Result<BTreeMap<usize, String>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("opening labels {}", path.display()))
        .code(USAGE)?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row
            .with_context(|| format!("parsing labels {}", path.display()))
            .code(DATA)?;
        out.insert(row.block_index, row.label);
    }
    Ok(out)
}

pub fn run(args: AnalyzeArgs, pool: &rayon::ThreadPool) -> anyhow::Result<()> {
    let run = util::open_run(&args.run.run)?;
    let mut sources = args.profiles.clone();
    sources.sort();
    sources.dedup();
    let needs_masks = sources.iter().any(|s| *s != ProfileSource::BlockMean);
    let masks = match (&args.masks, needs_masks) {
        (Some(dir), true) => Some(util::read_mask_dir(dir)?),
        (None, true) => return Err(util::usage("mask_* profiles need --masks")),
        _ => None,
    };
    let labels = args.labels.as_ref().map(read_labels).transpose()?;
    let max_t = util::dense_guard(args.max_t)?;
    let dense_mask = super::run_mask(&run, args.blocks)?;
    let heads = util::select_heads(&run, &args.select.layers, &args.select.heads)?;
    let t = run.manifest().t;
    let scale = 1.0 / (run.manifest().d as f32).sqrt();

    let per_head = util::per_head(pool, &heads, |l, h| {
        let mut out = Vec::new();
        for &source in &sources {
            let profile = match source {
                ProfileSource::BlockMean => {
                    let inputs = run.inputs(l, h).code(DATA)?;
                    let scores =
                        dense_scores(&inputs.q, &inputs.k, &dense_mask, max_t).code(DATA)?;
                    let means = block_mean(&dense_softmax(&scores), &dense_mask).code(DATA)?;
                    vertical_profile(l, h, ProfileInput::BlockMean(&means), &dense_mask)
                }
                _ => {
                    let sel = masks
                        .as_ref()
                        .and_then(|m| m.get(&(l, h)))
                        .with_context(|| format!("no mask for layer {l} head {h}"))
                        .code(DATA)?;
                    if sel.grid().t_orig() != t {
                        return Err(util::usage(format!(
                            "mask covers {} tokens, run has {t}",
                            sel.grid().t_orig()
                        )));
                    }
                    let mask = causal_block_mask(*sel.grid());
                    let input = if source == ProfileSource::MaskScore {
                        ProfileInput::MaskScore(sel, scale)
                    } else {
                        ProfileInput::MaskFrequency(sel)
                    };
                    vertical_profile(l, h, input, &mask)
                }
            };
            out.push(profile.code(DATA)?);
        }
        Ok(out)
    })?;

    // source-major order keeps each CSV section contiguous
    let profiles: Vec<VerticalProfile> = sources
        .iter()
        .flat_map(|s| {
            per_head
                .iter()
                .flatten()
                .filter(move |p| p.source == *s)
                .cloned()
        })
        .collect();

    let out = args.out.unwrap_or_else(|| run.root().join("analysis"));
    util::write_atomic(
        &out.join("profiles.csv"),
        profiles_csv(&profiles).as_bytes(),
    )?;
    util::write_atomic(
        &out.join("kurtosis.csv"),
        kurtosis_csv(&profiles).as_bytes(),
    )?;

    let mut ranking = String::from("source,rank,layer,head,kurtosis\n");
    for &source in &sources {
        let group: Vec<_> = profiles
            .iter()
            .filter(|p| p.source == source)
            .cloned()
            .collect();
        let ranked = match rank_receiver_heads(&group) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: {}: {e}", source.as_str());
                continue;
            }
        };
        println!("{} receiver heads:", source.as_str());
        for (i, r) in ranked.iter().enumerate() {
            let k = r.kurtosis.map(|k| k.to_string()).unwrap_or_default();
            let _ = writeln!(
                ranking,
                "{},{},{},{},{k}",
                source.as_str(),
                i + 1,
                r.layer,
                r.head
            );
            if i < 5 {
                println!(
                    "  {:>3}. layer {} head {} kurtosis {k}",
                    i + 1,
                    r.layer,
                    r.head
                );
            }
        }
    }
    util::write_atomic(&out.join("ranking.csv"), ranking.as_bytes())?;

    if let Some(labels) = &labels {
        let mut text = String::from("layer,head,source,category,mean\n");
        for p in &profiles {
            for (cat, mean) in category_means(p, labels) {
                let _ = writeln!(
                    text,
                    "{},{},{},{cat},{mean}",
                    p.layer,
                    p.head,
                    p.source.as_str()
                );
            }
        }
        util::write_atomic(&out.join("categories.csv"), text.as_bytes())?;
    }
    println!("wrote {} profiles to {}", profiles.len(), out.display());
    Ok(())
}
