//! SVG gallery of wave clusters: centroid plus member samples per cluster.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::WaveVocabulary;
use crate::segment::WaveKind;
use crate::Result;

const PANEL_W: f64 = 240.0;
const PANEL_H: f64 = 90.0;
const COLUMNS: usize = 4;
const MARGIN: f64 = 8.0;

/// Up to `per_cluster` seeded samples of member waves for each cluster.
pub fn gallery_samples(
    vocab: &WaveVocabulary,
    waves: &[(WaveKind, Vec<f64>)],
    per_cluster: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); vocab.k];
    for (i, (kind, w)) in waves.iter().enumerate() {
        let id = vocab.assign_wave(Some(w), *kind)? as usize;
        if (1..=vocab.k).contains(&id) {
            members[id - 1].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(members
        .into_iter()
        .map(|m| {
            let take = per_cluster.min(m.len());
            let mut picked: Vec<usize> = sample(&mut rng, m.len(), take).into_iter().map(|j| m[j]).collect();
            picked.sort_unstable();
            picked.into_iter().map(|i| waves[i].1.clone()).collect()
        })
        .collect())
}

fn polyline(out: &mut String, values: &[f64], x0: f64, y0: f64, lo: f64, hi: f64, style: &str) {
    let span = (hi - lo).max(1e-12);
    let step = PANEL_W / (values.len().max(2) - 1) as f64;
    out.push_str("<polyline fill=\"none\" ");
    out.push_str(style);
    out.push_str(" points=\"");
    for (i, v) in values.iter().enumerate() {
        let x = x0 + i as f64 * step;
        let y = y0 + PANEL_H - (v - lo) / span * PANEL_H;
        let _ = write!(out, "{x:.2},{y:.2} ");
    }
    out.push_str("\"/>\n");
}

/// Renders the gallery as a deterministic SVG document.
pub fn render_cluster_gallery(vocab: &WaveVocabulary, samples: &[Vec<Vec<f64>>]) -> String {
    let rows = vocab.k.div_ceil(COLUMNS);
    let cell_w = PANEL_W + 2.0 * MARGIN;
    let cell_h = PANEL_H + 2.0 * MARGIN + 14.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" font-family=\"monospace\" font-size=\"11\">",
        cell_w * COLUMNS as f64,
        cell_h * rows as f64
    );
    for (c, centroid) in vocab.centroids.iter().enumerate() {
        let x0 = (c % COLUMNS) as f64 * cell_w + MARGIN;
        let y0 = (c / COLUMNS) as f64 * cell_h + MARGIN + 14.0;
        let members = samples.get(c).map_or(&[][..], Vec::as_slice);
        let all = centroid.iter().chain(members.iter().flatten());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let _ = writeln!(
            out,
            "<text x=\"{x0:.2}\" y=\"{:.2}\">token {} (n={})</text>",
            y0 - 4.0,
            c + 1,
            members.len()
        );
        let _ = writeln!(
            out,
            "<rect x=\"{x0:.2}\" y=\"{y0:.2}\" width=\"{PANEL_W:.0}\" height=\"{PANEL_H:.0}\" fill=\"none\" stroke=\"#ccc\"/>"
        );
        for m in members {
            polyline(&mut out, m, x0, y0, lo, hi, "stroke=\"#999\" stroke-width=\"0.6\"");
        }
        polyline(&mut out, centroid, x0, y0, lo, hi, "stroke=\"#c00\" stroke-width=\"2\"");
    }
    out.push_str("</svg>\n");
    out
}

pub fn export_cluster_gallery(vocab: &WaveVocabulary, samples: &[Vec<Vec<f64>>], path: &Path) -> Result<()> {
    std::fs::write(path, render_cluster_gallery(vocab, samples))?;
    Ok(())
}
