//! Static HTML rendering of an explanation, images inlined as data URIs.

use std::fmt::Write;

use base64::Engine;
use exemplar_core::explainer::ExplanationRecord;
use exemplar_core::surrogate::{Op, RuleRecord};

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn rule_text(r: &RuleRecord) -> String {
    let conds: Vec<String> = r
        .conditions
        .iter()
        .map(|c| {
            let op = match c.op {
                Op::Le => "&le;",
                Op::Gt => "&gt;",
            };
            format!("latent feature #{} {op} {:.3}", c.feature, c.threshold)
        })
        .collect();
    let lhs = if conds.is_empty() { "always".to_string() } else { conds.join(" and ") };
    format!("{lhs} &rarr; {}", escape(&r.consequent.code))
}

/// `load` maps an artifact reference to its PNG bytes.
pub fn render_html(record: &ExplanationRecord, load: impl Fn(&str) -> Option<Vec<u8>>) -> String {
    let img = |r: &str, alt: &str| match load(r) {
        Some(bytes) => format!(
            "<img alt=\"{}\" src=\"data:image/png;base64,{}\">",
            escape(alt),
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ),
        None => format!("<span class=\"missing\">missing {}</span>", escape(r)),
    };
    let mut h = String::new();
    let _ = write!(
        h,
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Explanation {}</title>\n\
         <style>body{{font-family:sans-serif;margin:2em}} img{{width:112px;image-rendering:pixelated;margin:4px}} \
         section{{display:inline-block;vertical-align:top;margin-right:2em}} .warn{{color:#a40}}</style></head><body>\n",
        escape(&record.input_id[..record.input_id.len().min(12)])
    );
    let _ = writeln!(h, "<h1>Prediction: {}</h1>", escape(&record.label.code));
    if record.status == exemplar_core::explainer::Status::Degenerate {
        let _ = writeln!(
            h,
            "<p class=\"warn\">Degenerate neighborhood: every synthetic neighbor got the same label, so no counterfactual rule exists.</p>"
        );
    }
    let _ = writeln!(h, "<section><h2>Input</h2>{}</section>", img(&record.input, "input"));
    match &record.saliency {
        Some(s) => {
            let _ = writeln!(
                h,
                "<section><h2>Saliency</h2>{}<p>brown supports, green opposes; range {:.3} to {:.3}</p></section>",
                img(&s.r#ref, "saliency"),
                s.min,
                s.max
            );
        }
        None => {
            let _ = writeln!(h, "<section><h2>Saliency</h2><p>none (no exemplars)</p></section>");
        }
    }
    let _ = writeln!(h, "<section><h2>Exemplars ({})</h2>", record.exemplars.len());
    for (i, r) in record.exemplars.iter().enumerate() {
        h.push_str(&img(r, &format!("exemplar {i}")));
    }
    let _ = writeln!(h, "</section>\n<section><h2>Counterexemplars ({})</h2>", record.counterexemplars.len());
    for c in &record.counterexemplars {
        let _ = write!(
            h,
            "<figure>{}<figcaption>{}</figcaption></figure>",
            img(&c.image, &c.label.code),
            escape(&c.label.code)
        );
    }
    let _ = writeln!(h, "</section>\n<h2>Rule</h2><p>{}</p>", rule_text(&record.rule));
    if !record.counter_rules.is_empty() {
        let _ = writeln!(h, "<h2>Counterfactual rules</h2><ul>");
        for r in &record.counter_rules {
            let _ = writeln!(h, "<li>{}</li>", rule_text(r));
        }
        let _ = writeln!(h, "</ul>");
    }
    let _ = writeln!(
        h,
        "<p><small>Latent features are coordinates of the autoencoder's code and carry no direct visual meaning.</small></p>"
    );
    let _ = writeln!(h, "<h2>Neighborhood ({} valid)</h2><table>", record.neighborhood_total);
    for (code, n) in &record.neighborhood_stats {
        let _ = writeln!(h, "<tr><td>{}</td><td>{n}</td></tr>", escape(code));
    }
    let _ = writeln!(h, "</table>");
    if let Some(f) = record.fidelity {
        let _ = writeln!(h, "<p>Surrogate fidelity {f:.3}</p>");
    }
    for d in &record.diagnostics {
        let _ = writeln!(h, "<p class=\"warn\">{}</p>", escape(d));
    }
    h.push_str("</body></html>\n");
    h
}
