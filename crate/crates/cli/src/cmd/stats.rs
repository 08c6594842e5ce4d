use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use domalign::colorspace::{channel_histogram, rgb_to_lab};
use domalign::gtexa::{corpus_highfreq_histogram, highfreq_histogram, kl_divergence, laplacian_bin};
use domalign::imgio::{list_images, load_image};
use domalign::ImageRgbF64;

use crate::output::{require_dir, write_csv};
use crate::CliResult;

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Directory of PNG/PPM images.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory whose pooled high-frequency histogram each image is compared with.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ImageStats {
    file: String,
    height: usize,
    width: usize,
    l_mean: f64,
    a_mean: f64,
    b_mean: f64,
    l_std: f64,
    /// Mean of the stored L histogram bin centers.
    l_hist_mean: f64,
    /// Share of interior pixels with a zero Laplacian response.
    hf_zero_fraction: f64,
    kl_to_reference: Option<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn image_stats(path: &std::path::Path, img: &ImageRgbF64, reference: Option<&domalign::colorspace::Histogram>) -> CliResult<ImageStats> {
    let lab = rgb_to_lab(img);
    let l = lab.channel(0);
    let (l_mean, l_std) = mean_std(&l.data);
    let hf = highfreq_histogram(img)?;
    let kl_to_reference = reference.map(|r| kl_divergence(&hf, r)).transpose()?;
    Ok(ImageStats {
        file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        height: img.height(),
        width: img.width(),
        l_mean,
        a_mean: lab.channel(1).mean(),
        b_mean: lab.channel(2).mean(),
        l_std,
        l_hist_mean: channel_histogram(&l).mean_bin_center(),
        hf_zero_fraction: hf.counts()[laplacian_bin(0.0)] / hf.total(),
        kl_to_reference,
    })
}

pub fn run(args: StatsArgs) -> CliResult {
    require_dir(&args.input, "input")?;
    let reference = match &args.reference {
        Some(dir) => {
            require_dir(dir, "reference")?;
            let imgs = list_images(dir)?
                .iter()
                .map(load_image::<f64>)
                .collect::<domalign::Result<Vec<_>>>()?;
            if imgs.is_empty() {
                return Err(domalign::Error::EmptyDataset(format!("no images in {}", dir.display())).into());
            }
            Some(corpus_highfreq_histogram(&imgs)?)
        }
        None => None,
    };
    let paths = list_images(&args.input)?;
    if paths.is_empty() {
        return Err(domalign::Error::EmptyDataset(format!("no images in {}", args.input.display())).into());
    }
    let rows = paths
        .par_iter()
        .map(|p| image_stats(p, &load_image(p)?, reference.as_ref()))
        .collect::<CliResult<Vec<_>>>()?;
    match &args.out {
        Some(p) => write_csv(p, &rows),
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            for r in &rows {
                w.serialize(r).map_err(|e| crate::output::io_err(std::path::Path::new("<stdout>"), e))?;
            }
            w.flush().map_err(|e| crate::output::io_err(std::path::Path::new("<stdout>"), e))
        }
    }
}
