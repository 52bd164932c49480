//! CSV, text and SVG outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::eval::ApReport;
use super::experiment::CellResult;
use crate::error::{Error, Result};
use crate::synthdata::ClassSpec;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// `class,ap,num_gt,num_det` rows plus a `mAP` row.
pub fn metrics_csv(ap: &ApReport, classes: &[ClassSpec]) -> String {
    let mut s = String::from("class,ap,num_gt,num_det\n");
    for c in &ap.classes {
        let _ = writeln!(s, "{},{},{},{}", classes[c.class_id].name, fmt_opt(c.ap), c.num_gt, c.num_det);
    }
    let _ = writeln!(s, "mAP,{:.6},,", ap.map);
    s
}

pub fn pr_csv(pr: &[(f64, f64)]) -> String {
    let mut s = String::from("recall,precision\n");
    for (r, p) in pr {
        let _ = writeln!(s, "{r:.6},{p:.6}");
    }
    s
}

/// Precision-recall curve as a standalone SVG.
pub fn pr_svg(title: &str, pr: &[(f64, f64)]) -> String {
    let (w, h, m) = (360.0, 300.0, 40.0);
    let x = |r: f64| m + r * (w - 2.0 * m);
    let y = |p: f64| h - m - p * (h - 2.0 * m);
    let mut pts = format!("{:.1},{:.1}", x(0.0), y(pr.first().map_or(0.0, |q| q.1)));
    for &(r, p) in pr {
        let _ = write!(pts, " {:.1},{:.1}", x(r), y(p));
    }
    let esc = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">
<rect width="100%" height="100%" fill="white"/>
<text x="{m}" y="20">{esc}</text>
<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>
<text x="{cx}" y="{lx}" text-anchor="middle">recall</text>
<text x="12" y="{cy}" transform="rotate(-90 12 {cy})" text-anchor="middle">precision</text>
<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{pts}"/>
</svg>
"##,
        b = h - m,
        r = w - m,
        t = m,
        cx = w / 2.0,
        lx = h - 10.0,
        cy = h / 2.0,
    )
}

pub fn write_pr_svg(path: &Path, title: &str, pr: &[(f64, f64)]) -> Result<()> {
    write_text(path, &pr_svg(title, pr))
}

/// `metrics.csv`, `pr_<class>.csv` and `pr_<class>.svg` in `dir`.
pub fn write_eval_outputs(dir: &Path, ap: &ApReport, classes: &[ClassSpec]) -> Result<()> {
    write_text(&dir.join("metrics.csv"), &metrics_csv(ap, classes))?;
    for c in &ap.classes {
        let name = &classes[c.class_id].name;
        write_text(&dir.join(format!("pr_{name}.csv")), &pr_csv(&c.pr))?;
        write_pr_svg(&dir.join(format!("pr_{name}.svg")), name, &c.pr)?;
    }
    Ok(())
}

pub fn cell_tag(r: &CellResult) -> String {
    format!(
        "{}_s{}_{:?}_c{}r{}_f{}_seed{}",
        r.mode, r.scale, r.encoder, r.w_cls, r.w_reg, r.label_fraction, r.seed
    )
    .to_lowercase()
}

pub fn write_matrix_csv(path: &Path, rows: &[CellResult], classes: &[ClassSpec]) -> Result<()> {
    let mut s = String::from("mode,scale,encoder,w_cls,w_reg,label_fraction,seed,status,map");
    for c in classes {
        let _ = write!(s, ",ap_{}", c.name);
    }
    s.push_str(",auc,seconds\n");
    for r in rows {
        let _ = write!(
            s,
            "{},{},{:?},{},{},{},{},{},{:.6}",
            r.mode,
            r.scale,
            r.encoder,
            r.w_cls,
            r.w_reg,
            r.label_fraction,
            r.seed,
            r.status.replace(',', ";"),
            r.map
        );
        for c in classes {
            let ap = r.class_ap.iter().find(|(id, _)| *id == c.id).and_then(|(_, a)| *a);
            let _ = write!(s, ",{}", fmt_opt(ap));
        }
        let _ = writeln!(s, ",{},{:.1}", fmt_opt(r.auc), r.seconds);
    }
    write_text(path, &s)
}

/// Seed-averaged table, one line per distinct configuration.
pub fn render_summary(rows: &[CellResult], classes: &[ClassSpec]) -> String {
    let mut groups: Vec<(String, Vec<&CellResult>)> = Vec::new();
    for r in rows {
        let k = format!(
            "{:<24} s={:<4} {:<12} cls/reg={}/{} f={}",
            r.mode.to_string(),
            r.scale,
            format!("{:?}", r.encoder).to_lowercase(),
            r.w_cls,
            r.w_reg,
            r.label_fraction
        );
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    let mut s = String::new();
    let _ = write!(s, "{:<70} {:>6} {:>6}", "configuration", "seeds", "mAP");
    for c in classes {
        let _ = write!(s, " {:>8}", c.name);
    }
    s.push('\n');
    for (k, v) in groups {
        let ok: Vec<&&CellResult> = v.iter().filter(|r| r.status == "ok").collect();
        let mean = |f: &dyn Fn(&CellResult) -> Option<f64>| {
            let xs: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
        };
        let _ = write!(s, "{k:<70} {:>6} {:>6}", format!("{}/{}", ok.len(), v.len()), fmt_short(mean(&|r| Some(r.map))));
        for c in classes {
            let ap = mean(&|r| r.class_ap.iter().find(|(id, _)| *id == c.id).and_then(|(_, a)| *a));
            let _ = write!(s, " {:>8}", fmt_short(ap));
        }
        s.push('\n');
    }
    s
}

fn fmt_short(v: Option<f64>) -> String {
    v.map(|x| format!("{:.3}", x)).unwrap_or_else(|| "-".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_enough() {
        let s = pr_svg("a<b", &[(0.5, 1.0), (1.0, 0.5)]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        assert!(s.contains("polyline"));
    }

    #[test]
    fn pr_csv_rows() {
        assert_eq!(pr_csv(&[(1.0, 0.5)]), "recall,precision\n1.000000,0.500000\n");
    }
}
