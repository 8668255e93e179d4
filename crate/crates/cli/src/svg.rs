//! Minimal SVG emission. Coordinates are written with fixed precision so
//! identical runs emit byte-identical documents, and there is no drawing
//! dependency: artifacts stay diffable text.

pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

/// Fixed two-decimal coordinate formatting.
pub fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        let mut svg = Self {
            width,
            height,
            body: String::new(),
        };
        svg.rect(0.0, 0.0, width, height, r##"fill="#ffffff""##, &[]);
        svg
    }

    /// `attrs` is raw presentation markup (`fill="..." stroke="..."`);
    /// `data` rows become `data-*` attributes for machine readback.
    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, attrs: &str, data: &[(&str, String)]) {
        self.body.push_str(&format!(
            r#"<rect x="{}" y="{}" width="{}" height="{}" {}{}/>"#,
            fmt(x),
            fmt(y),
            fmt(w),
            fmt(h),
            attrs,
            data_attrs(data)
        ));
        self.body.push('\n');
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, attrs: &str) {
        self.body.push_str(&format!(
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" {}/>"#,
            fmt(x1),
            fmt(y1),
            fmt(x2),
            fmt(y2),
            attrs
        ));
        self.body.push('\n');
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], attrs: &str) {
        if pts.len() < 2 {
            return;
        }
        let points: Vec<String> = pts.iter().map(|(x, y)| format!("{},{}", fmt(*x), fmt(*y))).collect();
        self.body.push_str(&format!(
            r#"<polyline points="{}" fill="none" {}/>"#,
            points.join(" "),
            attrs
        ));
        self.body.push('\n');
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, attrs: &str, data: &[(&str, String)]) {
        self.body.push_str(&format!(
            r#"<circle cx="{}" cy="{}" r="{}" {}{}/>"#,
            fmt(cx),
            fmt(cy),
            fmt(r),
            attrs,
            data_attrs(data)
        ));
        self.body.push('\n');
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        self.body.push_str(&format!(
            r##"<text x="{}" y="{}" font-size="{}" font-family="sans-serif" text-anchor="{}" fill="#333333">{}</text>"##,
            fmt(x),
            fmt(y),
            fmt(size),
            anchor,
            escape(content)
        ));
        self.body.push('\n');
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n{body}</svg>\n",
            w = fmt(self.width),
            h = fmt(self.height),
            body = self.body
        )
    }
}

fn data_attrs(data: &[(&str, String)]) -> String {
    data.iter()
        .map(|(k, v)| format!(r#" data-{k}="{}""#, escape(v)))
        .collect()
}

/// Categorical palette keyed by query index.
pub fn query_color(j: usize) -> &'static str {
    const PALETTE: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    ];
    PALETTE[j % PALETTE.len()]
}

/// Golden-angle hue spread so neighboring proposal slots stay separable.
pub fn slot_color(i: usize) -> String {
    let hue = (i as f64 * 137.508) % 360.0;
    format!("hsl({},70%,45%)", fmt(hue))
}

/// White-to-deep-blue ramp over [0, 1].
pub fn heat_color(w: f64) -> String {
    let w = w.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * w).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}
