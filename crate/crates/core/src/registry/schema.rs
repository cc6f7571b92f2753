//! Parameter schemas for model-visible actions and argument validation.
//!
//! The schema language is a small closed subset of JSON Schema: typed fields,
//! a required set, enum constraints, array item schemas and a minimum array
//! length. Object schemas are always closed; unknown fields are an error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
    Array,
    Object,
}

impl ParamType {
    fn name(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Integer => "integer",
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
            ParamType::Array => "array",
            ParamType::Object => "object",
        }
    }

    fn accepts(self, value: &Value) -> bool {
        match self {
            ParamType::String => value.is_string(),
            ParamType::Integer => value.is_i64() || value.is_u64(),
            ParamType::Number => value.is_number(),
            ParamType::Boolean => value.is_boolean(),
            ParamType::Array => value.is_array(),
            ParamType::Object => value.is_object(),
        }
    }
}

/// One node of a parameter-schema tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSchema {
    #[serde(rename = "type")]
    pub kind: ParamType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub properties: BTreeMap<String, ParamSchema>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub required: Vec<String>,
    #[serde(rename = "enum", default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Box<ParamSchema>>,
    #[serde(rename = "minItems", default, skip_serializing_if = "Option::is_none")]
    pub min_items: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

impl ParamSchema {
    /// Checks structural well-formedness: required names exist, only
    /// objects carry properties, only arrays carry items, defaults and enum
    /// members have the declared type.
    pub fn check(&self, path: &str) -> Result<(), String> {
        if self.kind != ParamType::Object && (!self.properties.is_empty() || !self.required.is_empty()) {
            return Err(format!("{path}: properties/required only allowed on object schemas"));
        }
        if self.kind != ParamType::Array && (self.items.is_some() || self.min_items.is_some()) {
            return Err(format!("{path}: items/minItems only allowed on array schemas"));
        }
        let mut seen = BTreeSet::new();
        for name in &self.required {
            if !self.properties.contains_key(name) {
                return Err(format!("{path}: required field `{name}` is not declared"));
            }
            if !seen.insert(name) {
                return Err(format!("{path}: required field `{name}` listed twice"));
            }
        }
        if let Some(values) = &self.enum_values {
            if values.is_empty() {
                return Err(format!("{path}: empty enum"));
            }
            if let Some(bad) = values.iter().find(|v| !self.kind.accepts(v)) {
                return Err(format!("{path}: enum member {bad} is not a {}", self.kind.name()));
            }
        }
        if let Some(default) = &self.default {
            if !self.kind.accepts(default) {
                return Err(format!("{path}: default {default} is not a {}", self.kind.name()));
            }
        }
        for (name, child) in &self.properties {
            child.check(&join(path, name))?;
        }
        if let Some(items) = &self.items {
            items.check(&format!("{path}[]"))?;
        }
        Ok(())
    }

    /// Renders the schema as a JSON value suitable for a model tool definition.
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("schema serializes")
    }
}

/// A single argument validation failure, addressed by a dotted path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    pub path: String,
    pub reason: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.reason)
    }
}

/// Arguments that passed validation, with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedArgs(pub Value);

impl ValidatedArgs {
    pub fn into_inner(self) -> Value {
        self.0
    }
}

/// Validates `args` against `schema`. Total: never panics, never mutates
/// the input, returns either the completed arguments or every error found.
pub fn validate(schema: &ParamSchema, args: &Value) -> Result<ValidatedArgs, Vec<ValidationError>> {
    let mut errors = Vec::new();
    let out = validate_node(schema, args, "$", &mut errors);
    if errors.is_empty() {
        Ok(ValidatedArgs(out))
    } else {
        Err(errors)
    }
}

fn join(path: &str, field: &str) -> String {
    format!("{path}.{field}")
}

fn validate_node(schema: &ParamSchema, value: &Value, path: &str, errors: &mut Vec<ValidationError>) -> Value {
    if !schema.kind.accepts(value) {
        errors.push(ValidationError {
            path: path.to_string(),
            reason: format!("expected {}", schema.kind.name()),
        });
        return value.clone();
    }
    if let Some(allowed) = &schema.enum_values {
        if !allowed.contains(value) {
            errors.push(ValidationError {
                path: path.to_string(),
                reason: format!("value {value} not in enum"),
            });
        }
    }
    match (schema.kind, value) {
        (ParamType::Object, Value::Object(fields)) => {
            let mut out = Map::new();
            for (name, child) in fields {
                match schema.properties.get(name) {
                    Some(child_schema) => {
                        let v = validate_node(child_schema, child, &join(path, name), errors);
                        out.insert(name.clone(), v);
                    }
                    None => errors.push(ValidationError {
                        path: join(path, name),
                        reason: "unknown field".to_string(),
                    }),
                }
            }
            for (name, child_schema) in &schema.properties {
                if out.contains_key(name) || fields.contains_key(name) {
                    continue;
                }
                if schema.required.contains(name) {
                    errors.push(ValidationError {
                        path: join(path, name),
                        reason: "missing required field".to_string(),
                    });
                } else if let Some(default) = &child_schema.default {
                    out.insert(name.clone(), default.clone());
                }
            }
            Value::Object(out)
        }
        (ParamType::Array, Value::Array(items)) => {
            if let Some(min) = schema.min_items {
                if items.len() < min {
                    errors.push(ValidationError {
                        path: path.to_string(),
                        reason: format!("expected at least {min} item(s), got {}", items.len()),
                    });
                }
            }
            match &schema.items {
                Some(item_schema) => Value::Array(
                    items
                        .iter()
                        .enumerate()
                        .map(|(i, item)| validate_node(item_schema, item, &format!("{path}[{i}]"), errors))
                        .collect(),
                ),
                None => value.clone(),
            }
        }
        _ => value.clone(),
    }
}
