use std::collections::BTreeSet;
use std::fmt::Write;

use super::EvalReport;
use crate::imagecore::ImageTensor;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// One row per report (oracle id), one column per radius. A radius a report
/// did not evaluate is left blank.
pub fn asr_table_csv(reports: &[EvalReport]) -> String {
    let eps: BTreeSet<u8> = reports.iter().flat_map(|r| r.summaries.iter().map(|s| s.epsilon)).collect();
    let mut out = String::from("oracle");
    for e in &eps {
        write!(out, ",eps_{e}").unwrap();
    }
    out.push('\n');
    for r in reports {
        out.push_str(&csv_field(&r.oracle_id));
        for &e in &eps {
            out.push(',');
            if let Some(a) = r.asr(e) {
                write!(out, "{a}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Grouped bar chart of ASR against ε: one group per radius in ascending
/// order, one colored bar per report. Horizontal rules mark 0.25 steps.
pub fn render_asr_plot(reports: &[EvalReport]) -> ImageTensor {
    let eps: Vec<u8> = reports
        .iter()
        .flat_map(|r| r.summaries.iter().map(|s| s.epsilon))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (bar_w, gap, margin, plot_h) = (16usize, 24usize, 32usize, 240usize);
    let group_w = bar_w * reports.len().max(1) + gap;
    let width = 2 * margin + group_w * eps.len().max(1);
    let height = plot_h + 2 * margin;
    let mut img = ImageTensor::filled(height, width, [255; 3]).expect("plot size is positive");
    let base = margin + plot_h;

    let fill = |img: &mut ImageTensor, x0: usize, x1: usize, y0: usize, y1: usize, c: [u8; 3]| {
        for y in y0..y1 {
            for x in x0..x1 {
                img.set_pixel(x, y, c);
            }
        }
    };
    for q in 1..=4 {
        let y = base - plot_h * q / 4;
        fill(&mut img, margin, width - margin, y, y + 1, [220; 3]);
    }
    for (g, &e) in eps.iter().enumerate() {
        for (k, r) in reports.iter().enumerate() {
            let Some(a) = r.asr(e) else { continue };
            let h = (a.clamp(0.0, 1.0) * plot_h as f64).round() as usize;
            let x0 = margin + g * group_w + gap / 2 + k * bar_w;
            fill(&mut img, x0, x0 + bar_w - 2, base - h, base, PALETTE[k % PALETTE.len()]);
        }
    }
    fill(&mut img, margin - 1, margin, margin, base + 1, [0; 3]);
    fill(&mut img, margin - 1, width - margin, base, base + 1, [0; 3]);
    img
}
