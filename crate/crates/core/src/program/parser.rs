use super::{Program, ProgramError, SubTaskNode};
use crate::library::SubTaskCatalog;

const MAX_DEPTH: usize = 256;

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
    nodes: Vec<SubTaskNode>,
    offsets: Vec<usize>,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, ProgramError> {
        Err(ProgramError::Syntax {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        let rest = &self.text[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.text[self.pos..].chars().next()
    }

    fn expect(&mut self, c: char) -> Result<(), ProgramError> {
        match self.peek() {
            Some(found) if found == c => {
                self.pos += 1;
                Ok(())
            }
            Some(found) => self.err(format!("expected '{c}', found '{found}'")),
            None => self.err(format!("expected '{c}', found end of input")),
        }
    }

    fn ident(&mut self) -> Result<&'a str, ProgramError> {
        self.skip_ws();
        let rest = &self.text[self.pos..];
        let len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        if len == 0 {
            return match rest.chars().next() {
                Some(c) => self.err(format!("expected identifier, found '{c}'")),
                None => self.err("expected identifier, found end of input"),
            };
        }
        self.pos += len;
        Ok(&rest[..len])
    }

    fn call(&mut self, depth: usize) -> Result<usize, ProgramError> {
        if depth > MAX_DEPTH {
            return self.err(format!("nesting deeper than {MAX_DEPTH}"));
        }
        let op = self.ident()?;
        let offset = self.pos - op.len();
        let arg = if self.peek() == Some('[') {
            self.pos += 1;
            let a = self.ident()?;
            self.expect(']')?;
            Some(a)
        } else {
            None
        };
        self.expect('(')?;
        let mut inputs = Vec::new();
        if self.peek() != Some(')') {
            loop {
                inputs.push(self.call(depth + 1)?);
                if self.peek() == Some(',') {
                    self.pos += 1;
                } else {
                    break;
                }
            }
        }
        self.expect(')')?;
        self.nodes.push(SubTaskNode::new(op, arg, inputs));
        self.offsets.push(offset);
        Ok(self.nodes.len() - 1)
    }
}

fn parse_with_offsets(text: &str) -> Result<(Program, Vec<usize>), ProgramError> {
    let mut cur = Cursor {
        text,
        pos: 0,
        nodes: Vec::new(),
        offsets: Vec::new(),
    };
    cur.call(0)?;
    if let Some(c) = cur.peek() {
        return cur.err(format!("unexpected '{c}' after program"));
    }
    Ok((Program::from_nodes(cur.nodes)?, cur.offsets))
}

/// Parses the call syntax without consulting a catalog. Arity and
/// vocabulary problems are left to [`super::validate`].
pub fn parse_syntax(text: &str) -> Result<Program, ProgramError> {
    parse_with_offsets(text).map(|(p, _)| p)
}

/// Parses and checks every node against the catalog: known op, arity and
/// argument presence. Argument words are not checked against the
/// vocabulary here.
pub fn parse_program(text: &str, catalog: &SubTaskCatalog) -> Result<Program, ProgramError> {
    let (program, offsets) = parse_with_offsets(text)?;
    for (node, &offset) in program.nodes().iter().zip(&offsets) {
        let spec = catalog.get(&node.op).ok_or_else(|| ProgramError::UnknownOp {
            op: node.op.clone(),
            offset,
        })?;
        if spec.arity() != node.inputs.len() {
            return Err(ProgramError::Arity {
                op: node.op.clone(),
                expected: spec.arity(),
                found: node.inputs.len(),
            });
        }
        match (&node.arg, spec.takes_argument()) {
            (None, true) => return Err(ProgramError::MissingArgument { op: node.op.clone() }),
            (Some(a), false) => {
                return Err(ProgramError::ExtraArgument {
                    op: node.op.clone(),
                    arg: a.clone(),
                })
            }
            _ => {}
        }
    }
    Ok(program)
}

/// Canonical text: no whitespace, children comma-separated.
pub fn serialize(program: &Program) -> String {
    fn write(p: &Program, i: usize, out: &mut String) {
        let node = p.node(i);
        out.push_str(&node.op);
        if let Some(a) = &node.arg {
            out.push('[');
            out.push_str(a);
            out.push(']');
        }
        out.push('(');
        for (k, &c) in node.inputs.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            write(p, c, out);
        }
        out.push(')');
    }
    let mut out = String::new();
    write(program, program.root(), &mut out);
    out
}
