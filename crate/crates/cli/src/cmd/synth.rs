use std::path::PathBuf;

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stream_trace::tensor_store::{encode_tensor, RunManifest, MANIFEST_FILE};
use stream_trace::Matrix;

use crate::util::{self, USAGE};

#[derive(Args)]
pub struct SynthArgs {
    /// Directory to create the run in.
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Context length.
    #[arg(short = 'T', long = "tokens", default_value_t = 256)]
    t: usize,
    /// Head dimension.
    #[arg(short, long = "dim", default_value_t = 16)]
    d: usize,
    #[arg(long = "bq", default_value_t = 32)]
    b_q: usize,
    #[arg(long = "bk", default_value_t = 32)]
    b_k: usize,
    #[arg(long, default_value_t = 1)]
    l_d: usize,
    /// Keys every query is drawn towards, spread evenly over the context.
    #[arg(long, default_value_t = 4)]
    anchors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Uniform noise in [-1, 1] plus, per head, a shared direction added to all
/// queries and (scaled up) to a few anchor keys, so some key blocks attract
/// attention from everywhere.
fn head_tensors(rng: &mut ChaCha8Rng, args: &SynthArgs) -> (Matrix, Matrix) {
    let (t, d) = (args.t, args.d);
    let dir: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let strength = rng.gen_range(1.0f32..4.0);
    let noise = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..t * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    };
    let mut q = noise(rng);
    let mut k = noise(rng);
    for u in 0..t {
        for j in 0..d {
            q[u * d + j] += dir[j];
        }
    }
    for a in 0..args.anchors.min(t) {
        let v = a * t / args.anchors.min(t);
        for j in 0..d {
            k[v * d + j] += strength * dir[j];
        }
    }
    (
        Matrix::from_vec(t, d, q).expect("shape"),
        Matrix::from_vec(t, d, k).expect("shape"),
    )
}

pub fn run(args: SynthArgs) -> anyhow::Result<()> {
    if args.t == 0 || args.d == 0 || args.layers == 0 || args.heads == 0 {
        return Err(util::usage(
            "layers, heads, tokens and dim must be positive",
        ));
    }
    if args.l_d >= args.layers {
        return Err(util::usage("--l-d must be below --layers"));
    }
    let manifest = RunManifest {
        model: "synthetic".into(),
        num_layers: args.layers,
        num_heads: args.heads,
        t: args.t,
        d: args.d,
        b_q: args.b_q,
        b_k: args.b_k,
        l_d: args.l_d,
        files: RunManifest::default_files(args.layers, args.heads),
        reference_tokens: None,
        needle_span: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for entry in &manifest.files {
        let (q, k) = head_tensors(&mut rng, &args);
        util::write_atomic(&args.out.join(&entry.q), &encode_tensor(&q))?;
        util::write_atomic(&args.out.join(&entry.k), &encode_tensor(&k))?;
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    util::write_atomic(&args.out.join(MANIFEST_FILE), text.as_bytes())?;
    if let Err(e) = stream_trace::tensor_store::load_run(&args.out) {
        return Err(util::coded(USAGE, e.into()));
    }
    println!(
        "wrote {} heads, T={} d={} to {}",
        manifest.files.len(),
        args.t,
        args.d,
        args.out.display()
    );
    Ok(())
}
