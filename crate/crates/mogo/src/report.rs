use mogo_core::eval::EvalReport;
use serde_json::{json, Map, Value};

fn metrics(r: &EvalReport) -> [(&'static str, Option<f64>); 5] {
    [
        ("recon_l1", r.recon_l1),
        ("recon_mse", r.recon_mse),
        ("recon_fid", r.recon_fid),
        ("gen_fid", r.gen_fid),
        ("mmodality", r.mmodality),
    ]
}

pub fn to_json(r: &EvalReport, per_layer_l1: &[f64]) -> Value {
    let mut m = Map::new();
    for (k, v) in metrics(r) {
        m.insert(k.into(), v.map_or(Value::Null, |x| json!(x)));
    }
    m.insert("recon_l1_per_layer".into(), json!(per_layer_l1));
    m.insert("extractor".into(), json!(r.extractor));
    let counts: Map<String, Value> = r
        .counts
        .iter()
        .map(|(k, n)| (k.clone(), json!(n)))
        .collect();
    m.insert("counts".into(), Value::Object(counts));
    Value::Object(m)
}

pub fn to_table(r: &EvalReport, per_layer_l1: &[f64]) -> String {
    let mut rows: Vec<(String, String)> = metrics(r)
        .into_iter()
        .map(|(k, v)| {
            (
                k.to_string(),
                v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}")),
            )
        })
        .collect();
    for (v, l1) in per_layer_l1.iter().enumerate() {
        rows.push((format!("recon_l1[layers 0..={v}]"), format!("{l1:.6}")));
    }
    rows.push(("extractor".into(), r.extractor.clone()));
    for (k, n) in &r.counts {
        rows.push((k.clone(), n.to_string()));
    }
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter()
        .map(|(k, v)| format!("{k:<w$}  {v}\n"))
        .collect()
}

pub fn to_csv(r: &EvalReport, per_layer_l1: &[f64]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in metrics(r) {
        s.push_str(&format!(
            "{k},{}\n",
            v.map_or(String::new(), |x| x.to_string())
        ));
    }
    for (v, l1) in per_layer_l1.iter().enumerate() {
        s.push_str(&format!("recon_l1_layer{v},{l1}\n"));
    }
    for (k, n) in &r.counts {
        s.push_str(&format!("{k},{n}\n"));
    }
    s
}
