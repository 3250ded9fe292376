//! Straightforward loop implementations, written without the tape or any
//! matrix kernel, used as references for the library.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n == 0.0 {
        a.to_vec()
    } else {
        a.iter().map(|x| x / n).collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in v {
        if x > m {
            m = x;
        }
    }
    let mut e = Vec::with_capacity(v.len());
    let mut z = 0.0;
    for &x in v {
        let y = if x == f64::NEG_INFINITY { 0.0 } else { (x - m).exp() };
        z += y;
        e.push(y);
    }
    e.into_iter().map(|y| y / z).collect()
}

fn cross_entropy(targets: &[f64], logits: &[f64]) -> f64 {
    let p = softmax(logits);
    let mut s = 0.0;
    for k in 0..p.len() {
        if targets[k] != 0.0 {
            s -= targets[k] * p[k].ln();
        }
    }
    s
}

pub fn info_nce(skt: &[Vec<f64>], img: &[Vec<f64>], tau: f64) -> f64 {
    let n = skt.len();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| dot(&skt[i], &img[j]) / tau).collect();
        let mut t = vec![0.0; n];
        t[i] = 1.0;
        total += cross_entropy(&t, &logits);
    }
    total / n as f64
}

pub fn anchored_semantic(r: &[Vec<f64>], ids: &[usize], anchors: &[Vec<f64>], sim: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..r.len() {
        let t = softmax(&sim[ids[i]]);
        let logits: Vec<f64> = anchors.iter().map(|a| dot(&r[i], a) / tau).collect();
        total += cross_entropy(&t, &logits);
    }
    total / r.len() as f64
}

pub fn anchored_sample(skt: &[Vec<f64>], img: &[Vec<f64>], ids: &[usize], sim: &[Vec<f64>], tau: f64) -> f64 {
    let n = skt.len();
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| sim[ids[i]][ids[j]]).collect();
        let t = softmax(&row);
        let logits: Vec<f64> = (0..n).map(|k| dot(&skt[i], &img[k]) / tau).collect();
        total += cross_entropy(&t, &logits);
    }
    total / n as f64
}

/// Cosine similarity with the diagonal pinned to 1.
pub fn similarity(anchors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = anchors.len();
    let mut s = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            s[i][j] = if i == j { 1.0 } else { cosine(&anchors[i], &anchors[j]) };
        }
    }
    s
}

/// Unified-graph adjacency: similarity blocks on the diagonal, weight 1
/// between the two nodes of a class, nothing else across, softmax per row.
pub fn adjacency(word: &[Vec<f64>], visual: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = word.len();
    let sw = similarity(word);
    let sv = similarity(visual);
    let mut out = Vec::with_capacity(2 * c);
    for r in 0..2 * c {
        let mut logits = vec![f64::NEG_INFINITY; 2 * c];
        for (k, l) in logits.iter_mut().enumerate() {
            let (ri, ki) = (r % c, k % c);
            let same_side = (r < c) == (k < c);
            if same_side {
                *l = if r < c { sw[ri][ki] } else { sv[ri][ki] };
            } else if ri == ki {
                *l = 1.0;
            }
        }
        out.push(softmax(&logits));
    }
    out
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// GCN over already projected anchors. Returns (word, visual) unit rows.
pub fn gcn(word: &[Vec<f64>], visual: &[Vec<f64>], layers: &[Vec<Vec<f64>>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let a = adjacency(word, visual);
    let mut v: Vec<Vec<f64>> = word.iter().chain(visual).cloned().collect();
    for (l, w) in layers.iter().enumerate() {
        v = matmul(&matmul(&a, &v), w);
        if l + 1 < layers.len() {
            for row in &mut v {
                for x in row.iter_mut() {
                    *x = x.max(0.0);
                }
            }
        }
    }
    let v: Vec<Vec<f64>> = v.iter().map(|r| normalize(r)).collect();
    let c = word.len();
    (v[..c].to_vec(), v[c..].to_vec())
}

/// AP as the mean of precision at each relevant rank.
pub fn average_precision(rel: &[bool]) -> f64 {
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for k in 0..rel.len() {
        if rel[k] {
            let hits = rel[..=k].iter().filter(|&&r| r).count();
            s += hits as f64 / (k + 1) as f64;
        }
    }
    s / total as f64
}

/// Truncated AP: precision summed over relevant ranks within `k`, divided by
/// `min(R, k)`.
pub fn average_precision_at(rel: &[bool], k: usize) -> f64 {
    let total = rel.iter().filter(|&&r| r).count();
    let denom = total.min(k);
    if denom == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..rel.len().min(k) {
        if rel[i] {
            let hits = rel[..=i].iter().filter(|&&r| r).count();
            s += hits as f64 / (i + 1) as f64;
        }
    }
    s / denom as f64
}

pub struct Eval {
    pub map: f64,
    pub map_at_200: f64,
    pub p_at_k: Vec<f64>,
}

/// Position of gallery item `g` in the ranking for scores `s`: items with a
/// higher score, or an equal score and lower index, come first.
fn rank_position(s: &[f64], g: usize) -> usize {
    let mut pos = 0;
    for h in 0..s.len() {
        if s[h] > s[g] || (s[h] == s[g] && h < g) {
            pos += 1;
        }
    }
    pos
}

pub fn evaluate(
    queries: &[Vec<f64>],
    q_labels: &[usize],
    gallery: &[Vec<f64>],
    g_labels: &[usize],
    ks: &[usize],
) -> Eval {
    let mut map = 0.0;
    let mut map200 = 0.0;
    let mut p = vec![0.0; ks.len()];
    for (q, &ql) in queries.iter().zip(q_labels) {
        let scores: Vec<f64> = gallery.iter().map(|g| dot(&normalize(q), &normalize(g))).collect();
        let mut rel = vec![false; gallery.len()];
        for g in 0..gallery.len() {
            rel[rank_position(&scores, g)] = g_labels[g] == ql;
        }
        map += average_precision(&rel);
        map200 += average_precision_at(&rel, 200);
        for (slot, &k) in p.iter_mut().zip(ks) {
            *slot += rel.iter().take(k).filter(|&&r| r).count() as f64 / k as f64;
        }
    }
    let n = queries.len() as f64;
    Eval {
        map: map / n,
        map_at_200: map200 / n,
        p_at_k: p.into_iter().map(|x| x / n).collect(),
    }
}
