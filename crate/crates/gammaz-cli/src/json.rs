//! Hand-rolled JSON emission. Floats are always written as `{:.16e}` (17
//! significant digits, exact f64 round trip), so identical runs produce
//! byte-identical artifacts regardless of platform formatting defaults.

/// Streaming writer for a single JSON document, indented two spaces per
/// level. Keys are emitted in caller order; callers keep them sorted where
/// determinism across code paths matters.
pub struct JsonWriter {
    out: String,
    stack: Vec<Level>,
    after_key: bool,
}

struct Level {
    object: bool,
    items: usize,
}

impl JsonWriter {
    pub fn new() -> Self {
        JsonWriter { out: String::new(), stack: Vec::new(), after_key: false }
    }

    /// Closes the document; panics on unbalanced containers, which is a
    /// programming error, not an input error.
    pub fn finish(mut self) -> String {
        assert!(self.stack.is_empty(), "unbalanced JSON containers");
        self.out.push('\n');
        self.out
    }

    pub fn begin_object(&mut self) {
        self.before_value();
        self.out.push('{');
        self.stack.push(Level { object: true, items: 0 });
    }

    pub fn end_object(&mut self) {
        let level = self.stack.pop().expect("end_object without begin_object");
        assert!(level.object, "end_object closing an array");
        if level.items > 0 {
            self.newline_indent(self.stack.len());
        }
        self.out.push('}');
    }

    pub fn begin_array(&mut self) {
        self.before_value();
        self.out.push('[');
        self.stack.push(Level { object: false, items: 0 });
    }

    pub fn end_array(&mut self) {
        let level = self.stack.pop().expect("end_array without begin_array");
        assert!(!level.object, "end_array closing an object");
        if level.items > 0 {
            self.newline_indent(self.stack.len());
        }
        self.out.push(']');
    }

    pub fn key(&mut self, k: &str) {
        let depth = self.stack.len();
        {
            let top = self.stack.last_mut().expect("key outside any object");
            assert!(top.object, "key inside an array");
            if top.items > 0 {
                self.out.push(',');
            }
            top.items += 1;
        }
        self.newline_indent(depth);
        self.push_escaped(k);
        self.out.push_str(": ");
        self.after_key = true;
    }

    pub fn string(&mut self, s: &str) {
        self.before_value();
        self.push_escaped(s);
    }

    /// Non-finite values have no JSON encoding and become `null`.
    pub fn number(&mut self, x: f64) {
        self.before_value();
        if x.is_finite() {
            self.out.push_str(&format!("{x:.16e}"));
        } else {
            self.out.push_str("null");
        }
    }

    pub fn integer(&mut self, n: i64) {
        self.before_value();
        self.out.push_str(&n.to_string());
    }

    pub fn boolean(&mut self, b: bool) {
        self.before_value();
        self.out.push_str(if b { "true" } else { "false" });
    }

    pub fn null(&mut self) {
        self.before_value();
        self.out.push_str("null");
    }

    pub fn field_str(&mut self, k: &str, v: &str) {
        self.key(k);
        self.string(v);
    }

    pub fn field_num(&mut self, k: &str, x: f64) {
        self.key(k);
        self.number(x);
    }

    pub fn field_int(&mut self, k: &str, n: i64) {
        self.key(k);
        self.integer(n);
    }

    pub fn field_bool(&mut self, k: &str, b: bool) {
        self.key(k);
        self.boolean(b);
    }

    fn before_value(&mut self) {
        if self.after_key {
            self.after_key = false;
            return;
        }
        let depth = self.stack.len();
        if let Some(top) = self.stack.last_mut() {
            assert!(!top.object, "object values need a key first");
            if top.items > 0 {
                self.out.push(',');
            }
            top.items += 1;
            self.newline_indent(depth);
        }
    }

    fn newline_indent(&mut self, depth: usize) {
        self.out.push('\n');
        for _ in 0..depth {
            self.out.push_str("  ");
        }
    }

    fn push_escaped(&mut self, s: &str) {
        self.out.push('"');
        for c in s.chars() {
            match c {
                '"' => self.out.push_str("\\\""),
                '\\' => self.out.push_str("\\\\"),
                '\n' => self.out.push_str("\\n"),
                '\r' => self.out.push_str("\\r"),
                '\t' => self.out.push_str("\\t"),
                c if (c as u32) < 0x20 => {
                    self.out.push_str(&format!("\\u{:04x}", c as u32));
                }
                c => self.out.push(c),
            }
        }
        self.out.push('"');
    }
}
