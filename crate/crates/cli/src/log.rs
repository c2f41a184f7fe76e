//! Line-oriented JSON logs on standard error.

use serde_json::{json, Map, Value};

#[derive(Debug, Clone, Copy)]
pub struct Logger {
    pub quiet: bool,
}

impl Logger {
    pub fn info(&self, event: &str, fields: Value) {
        if !self.quiet {
            emit("info", event, fields);
        }
    }

    pub fn error(&self, event: &str, fields: Value) {
        emit("error", event, fields);
    }
}

fn emit(level: &str, event: &str, fields: Value) {
    let mut line = Map::new();
    line.insert("level".into(), json!(level));
    line.insert("event".into(), json!(event));
    if let Value::Object(extra) = fields {
        line.extend(extra);
    }
    eprintln!("{}", Value::Object(line));
}
