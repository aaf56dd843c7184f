use std::fs;
use std::io::Write as _;
use std::time::Instant;

use clap::Args;
use phsa_core::attention::VariantId;
use phsa_core::encoder::{
    apply_positional_encoding, encode_on_tape, encoder_forward, layer_param_count, EncoderConfig,
    EncoderParams, LayerKind,
};
use phsa_core::io::BENCH_HEADER;
use phsa_core::numeric::{Matrix, Tape};

use crate::config::{resolve_out_dir, Overrides};
use crate::error::CliResult;

const SEQ_LENGTHS: [usize; 3] = [64, 256, 1024];
const WARMUP: usize = 3;

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Timed iterations per case (warmup excluded)
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long)]
    pub out: Option<String>,
}

fn layer_config(base: &EncoderConfig, kind: LayerKind) -> EncoderConfig {
    let mut cfg = base.clone();
    cfg.num_layers = 1;
    match kind {
        LayerKind::Vanilla => {
            cfg.num_phsa_layers = 0;
            cfg.variant_for_upper = VariantId::M2;
            cfg.use_abs_pe = true;
        }
        LayerKind::Phonetic => {
            cfg.num_phsa_layers = 1;
            cfg.use_abs_pe = false;
        }
    }
    cfg
}

fn kind_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Vanilla => "vanilla_sa_abs_pe",
        LayerKind::Phonetic => "phsa_no_pe",
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() as f64 * p).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

struct TimingRow {
    t: usize,
    kind: &'static str,
    pass: &'static str,
    iters: usize,
    median_us: f64,
    p95_us: f64,
}

fn time_case(iters: usize, mut f: impl FnMut()) -> (f64, f64) {
    for _ in 0..WARMUP {
        f();
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        f();
        samples.push(start.elapsed().as_secs_f64() * 1e6);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (median(&samples), percentile(&samples, 0.95))
}

pub fn run(args: &BenchArgs) -> CliResult<()> {
    let run = args.overrides.resolve()?;
    let base = &run.encoder;
    let mut rows: Vec<TimingRow> = Vec::new();

    for kind in [LayerKind::Vanilla, LayerKind::Phonetic] {
        let cfg = layer_config(base, kind);
        let params = EncoderParams::<Matrix<f32>>::init(&cfg)?;
        for t in SEQ_LENGTHS {
            let x = Matrix::<f32>::from_fn(t, cfg.d_model, |i, j| {
                ((i * 31 + j * 17) % 101) as f32 / 101.0 - 0.5
            });

            let cfg_f = cfg.clone();
            let params_f = params.clone();
            let x_f = x.clone();
            let (median_us, p95_us) = time_case(args.iters, move || {
                let _ = encoder_forward(&cfg_f, &params_f, &x_f, false).expect("forward");
            });
            rows.push(TimingRow {
                t,
                kind: kind_name(kind),
                pass: "forward",
                iters: args.iters,
                median_us,
                p95_us,
            });

            let cfg_b = cfg.clone();
            let params_b = params.clone();
            let x_b = x.clone();
            let (median_us, p95_us) = time_case(args.iters, move || {
                let embedded = apply_positional_encoding(&cfg_b, &x_b).expect("pe");
                let mut tape = Tape::new();
                let xid = tape.leaf(embedded);
                let staged = params_b.stage(&mut tape);
                let (out, _) =
                    encode_on_tape(&mut tape, &cfg_b, &staged, xid, false, None).expect("forward");
                let loss = tape.sum(out);
                let _ = tape.backward(loss).expect("backward");
            });
            rows.push(TimingRow {
                t,
                kind: kind_name(kind),
                pass: "forward_backward",
                iters: args.iters,
                median_us,
                p95_us,
            });
        }
    }

    let counts = [
        layer_param_count(
            LayerKind::Vanilla,
            base.d_model,
            base.num_heads,
            base.d_h,
            base.ffn_dim,
        ),
        layer_param_count(
            LayerKind::Phonetic,
            base.d_model,
            base.num_heads,
            base.d_h,
            base.ffn_dim,
        ),
    ];

    println!("layer parameter counts (positional tables excluded):");
    for pc in &counts {
        println!("  {}: {} total", kind_name(pc.kind), pc.total());
        for (component, n) in &pc.components {
            println!("    {component}: {n}");
        }
    }
    let diff = counts[1].total() as i64 - counts[0].total() as i64;
    println!(
        "  phonetic minus vanilla: {diff:+} (content proj/bias/slopes added, query/key biases removed)"
    );

    println!("t\tkind\tpass\tmedian_us\tp95_us");
    for row in &rows {
        println!(
            "{}\t{}\t{}\t{:.1}\t{:.1}",
            row.t, row.kind, row.pass, row.median_us, row.p95_us
        );
    }
    // relative forward cost, informational only
    for t in SEQ_LENGTHS {
        let of = |kind: &str| {
            rows.iter()
                .find(|r| r.t == t && r.kind == kind && r.pass == "forward")
                .map(|r| r.median_us)
                .unwrap_or(f64::NAN)
        };
        let vanilla = of("vanilla_sa_abs_pe");
        let phonetic = of("phsa_no_pe");
        println!(
            "T={t}: phonetic forward / vanilla forward = {:.3}",
            phonetic / vanilla
        );
    }

    if let Some(out) = &args.out {
        let out = resolve_out_dir(out);
        fs::create_dir_all(&out)?;
        let mut file = fs::File::create(out.join("bench.csv"))?;
        writeln!(file, "{BENCH_HEADER}")?;
        writeln!(file, "t,kind,pass,iters,median_us,p95_us")?;
        for row in &rows {
            writeln!(
                file,
                "{},{},{},{},{},{}",
                row.t, row.kind, row.pass, row.iters, row.median_us, row.p95_us
            )?;
        }
        let mut file = fs::File::create(out.join("bench_params.csv"))?;
        writeln!(file, "{BENCH_HEADER}")?;
        writeln!(file, "kind,component,count")?;
        for pc in &counts {
            for (component, n) in &pc.components {
                writeln!(file, "{},{component},{n}", kind_name(pc.kind))?;
            }
            writeln!(file, "{},total,{}", kind_name(pc.kind), pc.total())?;
        }
        println!("wrote bench.csv and bench_params.csv to {}", out.display());
    }
    Ok(())
}
