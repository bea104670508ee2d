//! `sfuqr eigen-check`: compare the Nyström basis with the exact one.

use std::path::PathBuf;

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfuqr::correlation;
use sfuqr::eigen::{exact_basis, nystrom_basis_with, EXACT_MAX_N};
use sfuqr::geometry::{anchors_at, build_connectivity_with, kmeans_anchors, Range, SiteSet};

use crate::config;
use crate::data::Table;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Args)]
pub struct EigenCheckArgs {
    /// Random uniform sites on the unit square (ignored with --input).
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub anchors: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `auto` or a positive value.
    #[arg(long, default_value = "auto")]
    pub range: String,
    /// exponential or gaussian
    #[arg(long, default_value = "exponential")]
    pub kernel: String,
    /// Number of leading pairs to compare.
    #[arg(long, default_value_t = 50)]
    pub pairs: usize,
    /// Read sites from a CSV instead of drawing them.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Coordinate columns as `x,y`.
    #[arg(long, default_value = "coord_x,coord_y")]
    pub coords: String,
}

fn sites(args: &EigenCheckArgs) -> CliResult<SiteSet> {
    let coords: Vec<[f64; 2]> = match &args.input {
        Some(path) => {
            let (cx, cy) = config::coord_pair(&config::split_list(&args.coords))?;
            let t = Table::read(path)?;
            let (xs, ys) = (t.column(&cx)?, t.column(&cy)?);
            xs.into_iter()
                .zip(ys)
                .filter_map(|(a, b)| Some([a?, b?]))
                .collect()
        }
        None => {
            if args.n > EXACT_MAX_N {
                return Err(too_large(args.n));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            (0..args.n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect()
        }
    };
    SiteSet::new(coords).map_err(|e| CliError::Input(e.to_string()))
}

fn too_large(n: usize) -> CliError {
    CliError::Numerical {
        stage: "eigen-decomposition".into(),
        message: format!(
            "the exact reference is limited to N <= {EXACT_MAX_N} sites (requested {n}); \
             check accuracy on a subsample, then fit with --approx nystrom"
        ),
    }
}

pub fn run(args: EigenCheckArgs) -> CliResult<()> {
    let sites = sites(&args)?;
    let n = sites.len();
    if n > EXACT_MAX_N {
        return Err(too_large(n));
    }
    let range = config::parse_range(&args.range)?
        .resolve(&sites)
        .map_err(|e| CliError::numerical("range", e))?;
    let kernel = config::parse_kernel(&args.kernel)?;
    let cap = args.pairs.max(1);

    let c = build_connectivity_with(&sites, Range::Fixed(range), kernel)
        .map_err(|e| CliError::numerical("connectivity", e))?;
    let exact = exact_basis(&c, cap).map_err(|e| CliError::numerical("eigen-decomposition", e))?;
    let anchors = if args.anchors >= n {
        anchors_at(sites.coords().to_vec())
    } else {
        kmeans_anchors(&sites, args.anchors, args.seed)
    }
    .map_err(|e| CliError::numerical("anchor placement", e))?;
    let approx = nystrom_basis_with(&sites, &anchors, range, cap, kernel)
        .map_err(|e| CliError::numerical("eigen-decomposition", e))?;

    let pairs = exact.len().min(approx.len());
    println!("# n = {n}, anchors = {}, range = {range}", anchors.len());
    println!("l,exact_lambda,approx_lambda,rel_error,abs_corr");
    let mut corrs = Vec::with_capacity(pairs);
    for l in 0..pairs {
        let a = exact.values()[l];
        let b = approx.values()[l];
        let e: Vec<f64> = exact.vectors().column(l).iter().copied().collect();
        let f: Vec<f64> = approx.vectors().column(l).iter().copied().collect();
        let r = correlation(&e, &f).abs();
        corrs.push(r);
        println!("{},{a},{b},{},{r:.6}", l + 1, ((b - a) / a).abs());
    }
    let head = &corrs[..corrs.len().min(10)];
    let mean = head.iter().sum::<f64>() / head.len().max(1) as f64;
    println!("# mean |corr| over the first {} pairs: {mean:.6}", head.len());
    Ok(())
}
