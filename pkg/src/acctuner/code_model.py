"""Structural model of a restricted C subset: statements, loops, variable refs.

The parser accepts the slice of C the rest of the pipeline can reason about:
global/local scalar and fixed-extent array declarations, functions, for /
while / if statements, assignments, arithmetic expressions and calls with
visible argument lists.  Anything else (preprocessor lines, pointers, structs,
switch, ...) raises ParseError naming the construct: planning transfers for
code we cannot analyze would be silently wrong, so we fail loudly instead.

A project can also enter the pipeline as a pre-analyzed structural
description (JSON, see dump_structural / load_structural); such models carry
loop and variable facts but no statement bodies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional, Union

from .errors import ParseError

# Calls whose arguments are only read (no array mutation through the call).
READONLY_FUNCS = {"print", "printf", "fprintf", "puts"}
MATH_FUNCS = {"sqrt", "fabs", "sin", "cos", "tan", "exp", "log", "pow",
              "floor", "ceil", "fmin", "fmax", "abs"}

TYPE_KEYWORDS = {"void", "int", "long", "short", "char", "float", "double",
                 "unsigned", "signed", "size_t"}
QUALIFIERS = {"static", "const", "register"}
FLOAT_TYPES = {"float", "double", "long double"}

Region = Union[int, str]  # loop_id | "pre" | "post" | "host:<n>"


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------

_PUNCT = [
    "<<=", ">>=",
    "++", "--", "+=", "-=", "*=", "/=", "%=", "==", "!=", "<=", ">=",
    "&&", "||", "<<", ">>",
    "+", "-", "*", "/", "%", "<", ">", "=", "!", "&", "|", "^", "~",
    "?", ":", ";", ",", "(", ")", "[", "]", "{", "}", ".",
]


@dataclass(frozen=True)
class Token:
    kind: str  # name | num | str | char | punct | preproc | eof
    text: str
    pos: int
    line: int
    col: int


def _tokenize(text: str, file_id: str) -> list[Token]:
    toks: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)

    def advance(k: int) -> None:
        nonlocal i, line, col
        for _ in range(k):
            if text[i] == "\n":
                line += 1
                col = 1
            else:
                col += 1
            i += 1

    while i < n:
        c = text[i]
        if c in " \t\r\n":
            advance(1)
            continue
        if text.startswith("//", i):
            j = text.find("\n", i)
            advance((j if j != -1 else n) - i)
            continue
        if text.startswith("/*", i):
            j = text.find("*/", i + 2)
            if j == -1:
                raise ParseError("unterminated comment", line, col, file_id)
            advance(j + 2 - i)
            continue
        if c == "#":
            j = text.find("\n", i)
            directive = text[i:(j if j != -1 else n)]
            toks.append(Token("preproc", directive, i, line, col))
            advance(len(directive))
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(Token("name", text[i:j], i, line, col))
            advance(j - i)
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            seen_dot = seen_exp = False
            while j < n:
                ch = text[j]
                if ch.isdigit():
                    j += 1
                elif ch == "." and not seen_dot and not seen_exp:
                    seen_dot = True
                    j += 1
                elif ch in "eE" and not seen_exp and j > i:
                    seen_exp = True
                    j += 1
                    if j < n and text[j] in "+-":
                        j += 1
                else:
                    break
            while j < n and text[j] in "fFlLuU":  # literal suffixes
                j += 1
            toks.append(Token("num", text[i:j], i, line, col))
            advance(j - i)
            continue
        if c == '"' or c == "'":
            quote = c
            j = i + 1
            while j < n and text[j] != quote:
                j += 2 if text[j] == "\\" else 1
            if j >= n:
                raise ParseError("unterminated literal", line, col, file_id)
            kind = "str" if quote == '"' else "char"
            toks.append(Token(kind, text[i:j + 1], i, line, col))
            advance(j + 1 - i)
            continue
        for p in _PUNCT:
            if text.startswith(p, i):
                toks.append(Token("punct", p, i, line, col))
                advance(len(p))
                break
        else:
            raise ParseError(f"unrecognized character {c!r}", line, col, file_id)
    toks.append(Token("eof", "", n, line, col))
    return toks


# ---------------------------------------------------------------------------
# Syntax tree
# ---------------------------------------------------------------------------

@dataclass
class Expr:
    kind: str  # name | num | str | char | bin | un | assign | index | call | cast
    span: tuple[int, int]
    op: Optional[str] = None      # operator for bin/un/assign ("++post" etc.)
    text: Optional[str] = None    # identifier / literal text / callee / cast type
    kids: list["Expr"] = field(default_factory=list)

    def walk(self) -> Iterator["Expr"]:
        yield self
        for k in self.kids:
            yield from k.walk()


@dataclass
class Decl:
    name: str
    base_type: str
    extents: list[int]            # [] for scalars
    init: Optional[Expr]
    span: tuple[int, int]         # span of the whole declaration statement


@dataclass
class Stmt:
    kind: str  # function|decl|for|while|if|expr|return|break|continue|goto|label|empty|block
    span: tuple[int, int]
    children: list["Stmt"] = field(default_factory=list)
    name: Optional[str] = None        # function name / goto target / label
    decls: list[Decl] = field(default_factory=list)
    expr: Optional[Expr] = None       # expr stmt value, return value, if/while cond
    for_init: Optional["Stmt"] = None  # decl or expr statement, not part of .children
    cond: Optional[Expr] = None       # for condition
    step: Optional[Expr] = None       # for increment
    index_var: Optional[str] = None   # for statements
    else_children: list["Stmt"] = field(default_factory=list)

    def body(self) -> list["Stmt"]:
        """Body statement list with a single wrapping block unwrapped."""
        if len(self.children) == 1 and self.children[0].kind == "block":
            return self.children[0].children
        return self.children

    def walk(self) -> Iterator["Stmt"]:
        yield self
        if self.for_init is not None:
            yield from self.for_init.walk()
        for c in self.children:
            yield from c.walk()
        for c in self.else_children:
            yield from c.walk()

    def exprs(self) -> Iterator[Expr]:
        for e in (self.expr, self.cond, self.step):
            if e is not None:
                yield e
        for d in self.decls:
            if d.init is not None:
                yield d.init


@dataclass
class SourceUnit:
    file_id: str
    original_text: str
    statements: list[Stmt]
    top_level_decls: list[Decl]
    functions: dict[str, Stmt]

    def reemit(self) -> str:
        """Rebuild the text from top-level statement spans plus the gaps."""
        out, pos = [], 0
        for st in self.statements:
            s, e = st.span
            out.append(self.original_text[pos:s])
            out.append(self.original_text[s:e])
            pos = e
        out.append(self.original_text[pos:])
        return "".join(out)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str, file_id: str):
        self.text = text
        self.file_id = file_id
        self.toks = _tokenize(text, file_id)
        self.i = 0

    # -- token helpers ------------------------------------------------------

    def peek(self, k: int = 0) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def next(self) -> Token:
        t = self.toks[self.i]
        if t.kind != "eof":
            self.i += 1
        return t

    def at(self, text: str) -> bool:
        t = self.peek()
        return t.kind in ("punct", "name") and t.text == text

    def expect(self, text: str) -> Token:
        t = self.peek()
        if not self.at(text):
            self.fail(f"expected {text!r}, found {t.text!r}")
        return self.next()

    def fail(self, message: str, tok: Optional[Token] = None) -> None:
        t = tok or self.peek()
        raise ParseError(message, t.line, t.col, self.file_id)

    def reject_construct(self, construct: str, tok: Optional[Token] = None) -> None:
        self.fail(f"{construct} is outside the supported C subset", tok)

    # -- entry --------------------------------------------------------------

    def parse_unit(self) -> SourceUnit:
        stmts: list[Stmt] = []
        decls: list[Decl] = []
        funcs: dict[str, Stmt] = {}
        while self.peek().kind != "eof":
            self.check_preproc()
            st = self.parse_top_level()
            stmts.append(st)
            if st.kind == "decl":
                decls.extend(st.decls)
            elif st.kind == "function" and st.children:
                funcs[st.name] = st
        return SourceUnit(self.file_id, self.text, stmts, decls, funcs)

    def check_preproc(self) -> None:
        t = self.peek()
        if t.kind != "preproc":
            return
        head = t.text.split()[0] if t.text.split() else "#"
        if head in ("#if", "#ifdef", "#ifndef", "#elif", "#else", "#endif"):
            self.reject_construct("preprocessor conditional", t)
        self.reject_construct(f"preprocessor directive {head}", t)

    def parse_top_level(self) -> Stmt:
        t = self.peek()
        if t.kind != "name":
            self.fail(f"expected declaration or function, found {t.text!r}")
        if t.text in ("struct", "union", "enum", "typedef"):
            self.reject_construct(f"{t.text} declaration", t)
        if t.text not in TYPE_KEYWORDS and t.text not in QUALIFIERS:
            self.fail(f"expected type name, found {t.text!r}")
        start = t.pos
        base = self.parse_type()
        name_tok = self.peek()
        if name_tok.kind != "name":
            self.fail("expected identifier after type name")
        if self.peek(1).kind == "punct" and self.peek(1).text == "(":
            return self.parse_function(start, base)
        return self.parse_decl_stmt(start, base)

    def parse_type(self) -> str:
        parts = []
        while self.peek().kind == "name" and self.peek().text in QUALIFIERS:
            self.next()
        while self.peek().kind == "name" and self.peek().text in TYPE_KEYWORDS:
            parts.append(self.next().text)
        if not parts:
            self.fail("expected type name")
        if self.at("*"):
            self.reject_construct("pointer declarator")
        return " ".join(parts)

    def parse_function(self, start: int, base: str) -> Stmt:
        name = self.next().text
        self.expect("(")
        params: list[Decl] = []
        if not self.at(")"):
            while True:
                if self.at("void") and self.peek(1).text == ")":
                    self.next()
                    break
                pstart = self.peek().pos
                ptype = self.parse_type()
                ptok = self.peek()
                if ptok.kind != "name":
                    self.fail("expected parameter name")
                pname = self.next().text
                extents: list[int] = []
                while self.at("["):
                    self.next()
                    if self.at("]"):  # unsized array parameter
                        extents.append(0)
                    else:
                        extents.append(self.parse_const_int())
                    self.expect("]")
                params.append(Decl(pname, ptype, extents, None, (pstart, self.peek().pos)))
                if self.at(","):
                    self.next()
                    continue
                break
        self.expect(")")
        if self.at(";"):  # prototype: name known, body unknown
            end = self.next()
            return Stmt("function", (start, end.pos + 1), name=name, decls=params)
        body = self.parse_block()
        node = Stmt("function", (start, body.span[1]), children=[body],
                    name=name, decls=params)
        return node

    def parse_const_int(self) -> int:
        t = self.peek()
        if t.kind != "num" or any(ch in t.text for ch in ".eE"):
            self.fail("array extent must be an integer literal")
        self.next()
        return int(t.text.rstrip("uUlL"))

    def parse_decl_stmt(self, start: int, base: str) -> Stmt:
        decls: list[Decl] = []
        while True:
            tok = self.peek()
            if tok.kind != "name":
                self.fail("expected identifier in declaration")
            name = self.next().text
            extents: list[int] = []
            while self.at("["):
                self.next()
                extents.append(self.parse_const_int())
                self.expect("]")
            init = None
            if self.at("="):
                self.next()
                if self.at("{"):
                    self.reject_construct("aggregate initializer")
                init = self.parse_expr()
            decls.append(Decl(name, base, extents, init, (start, 0)))
            if self.at(","):
                self.next()
                continue
            break
        end = self.expect(";")
        span = (start, end.pos + 1)
        for d in decls:
            d.span = span
        return Stmt("decl", span, decls=decls)

    # -- statements ---------------------------------------------------------

    def parse_block(self) -> Stmt:
        start = self.expect("{").pos
        children = []
        while not self.at("}"):
            if self.peek().kind == "eof":
                self.fail("unterminated block")
            self.check_preproc()
            children.append(self.parse_stmt())
        end = self.next()
        return Stmt("block", (start, end.pos + 1), children=children)

    def parse_stmt(self) -> Stmt:
        self.check_preproc()
        t = self.peek()
        if t.kind == "punct" and t.text == "{":
            return self.parse_block()
        if t.kind == "punct" and t.text == ";":
            self.next()
            return Stmt("empty", (t.pos, t.pos + 1))
        if t.kind == "name":
            kw = t.text
            if kw == "for":
                return self.parse_for()
            if kw == "while":
                return self.parse_while()
            if kw == "if":
                return self.parse_if()
            if kw == "return":
                self.next()
                e = None if self.at(";") else self.parse_expr()
                end = self.expect(";")
                return Stmt("return", (t.pos, end.pos + 1), expr=e)
            if kw in ("break", "continue"):
                self.next()
                end = self.expect(";")
                return Stmt(kw, (t.pos, end.pos + 1))
            if kw == "goto":
                self.next()
                target = self.peek()
                if target.kind != "name":
                    self.fail("expected label after goto")
                self.next()
                end = self.expect(";")
                return Stmt("goto", (t.pos, end.pos + 1), name=target.text)
            if kw in ("switch", "do"):
                self.reject_construct(f"{kw} statement", t)
            if kw in ("struct", "union", "enum", "typedef"):
                self.reject_construct(f"{kw} declaration", t)
            if kw in TYPE_KEYWORDS or kw in QUALIFIERS:
                start = t.pos
                base = self.parse_type()
                return self.parse_decl_stmt(start, base)
            if self.peek(1).kind == "punct" and self.peek(1).text == ":":
                self.next()
                colon = self.next()
                return Stmt("label", (t.pos, colon.pos + 1), name=t.text)
        e = self.parse_expr()
        end = self.expect(";")
        return Stmt("expr", (t.pos, end.pos + 1), expr=e)

    def parse_for(self) -> Stmt:
        start = self.expect("for").pos
        self.expect("(")
        init: Optional[Stmt] = None
        if not self.at(";"):
            t = self.peek()
            if t.kind == "name" and (t.text in TYPE_KEYWORDS or t.text in QUALIFIERS):
                base_start = t.pos
                base = self.parse_type()
                init = self.parse_decl_stmt(base_start, base)  # consumes ';'
            else:
                e = self.parse_expr()
                end = self.expect(";")
                init = Stmt("expr", (t.pos, end.pos + 1), expr=e)
        else:
            self.next()
        cond = None if self.at(";") else self.parse_expr()
        self.expect(";")
        step = None if self.at(")") else self.parse_expr()
        self.expect(")")
        body = self.parse_stmt()
        node = Stmt("for", (start, body.span[1]), children=[body],
                    for_init=init, cond=cond, step=step)
        node.index_var = _infer_index_var(node)
        return node

    def parse_while(self) -> Stmt:
        start = self.expect("while").pos
        self.expect("(")
        cond = self.parse_expr()
        self.expect(")")
        body = self.parse_stmt()
        return Stmt("while", (start, body.span[1]), children=[body], expr=cond)

    def parse_if(self) -> Stmt:
        start = self.expect("if").pos
        self.expect("(")
        cond = self.parse_expr()
        self.expect(")")
        then = self.parse_stmt()
        node = Stmt("if", (start, then.span[1]), children=[then], expr=cond)
        if self.at("else"):
            self.next()
            other = self.parse_stmt()
            node.else_children = [other]
            node.span = (start, other.span[1])
        return node

    # -- expressions (precedence climbing) ----------------------------------

    _BIN_LEVELS = [
        ["||"], ["&&"], ["|"], ["^"], ["&"],
        ["==", "!="], ["<", ">", "<=", ">="],
        ["<<", ">>"], ["+", "-"], ["*", "/", "%"],
    ]

    def parse_expr(self) -> Expr:
        return self.parse_assign()

    def parse_assign(self) -> Expr:
        lhs = self.parse_binary(0)
        t = self.peek()
        if t.kind == "punct" and t.text in ("=", "+=", "-=", "*=", "/=", "%="):
            self.next()
            rhs = self.parse_assign()
            if lhs.kind not in ("name", "index"):
                self.fail("assignment target must be a variable or array element", t)
            return Expr("assign", (lhs.span[0], rhs.span[1]), op=t.text, kids=[lhs, rhs])
        if t.kind == "punct" and t.text == "?":
            self.reject_construct("ternary operator", t)
        return lhs

    def parse_binary(self, level: int) -> Expr:
        if level >= len(self._BIN_LEVELS):
            return self.parse_unary()
        lhs = self.parse_binary(level + 1)
        ops = self._BIN_LEVELS[level]
        while self.peek().kind == "punct" and self.peek().text in ops:
            op = self.next().text
            rhs = self.parse_binary(level + 1)
            lhs = Expr("bin", (lhs.span[0], rhs.span[1]), op=op, kids=[lhs, rhs])
        return lhs

    def parse_unary(self) -> Expr:
        t = self.peek()
        if t.kind == "punct":
            if t.text == "*":
                self.reject_construct("pointer dereference", t)
            if t.text == "&":
                self.reject_construct("address-of operator", t)
            if t.text in ("-", "+", "!", "~"):
                self.next()
                e = self.parse_unary()
                return Expr("un", (t.pos, e.span[1]), op=t.text, kids=[e])
            if t.text in ("++", "--"):
                self.next()
                e = self.parse_unary()
                return Expr("un", (t.pos, e.span[1]), op=t.text + "pre", kids=[e])
            if t.text == "(":
                nxt = self.peek(1)
                if nxt.kind == "name" and nxt.text in TYPE_KEYWORDS:
                    self.next()
                    ctype = self.parse_type()
                    close = self.expect(")")
                    e = self.parse_unary()
                    return Expr("cast", (t.pos, e.span[1]), text=ctype, kids=[e])
        return self.parse_postfix()

    def parse_postfix(self) -> Expr:
        e = self.parse_primary()
        while True:
            t = self.peek()
            if t.kind != "punct":
                break
            if t.text == "[":
                self.next()
                sub = self.parse_expr()
                end = self.expect("]")
                if e.kind == "index":
                    e.kids.append(sub)
                    e.span = (e.span[0], end.pos + 1)
                elif e.kind == "name":
                    e = Expr("index", (e.span[0], end.pos + 1), kids=[e, sub])
                else:
                    self.fail("subscript applied to a non-array expression", t)
            elif t.text == "(":
                if e.kind != "name":
                    self.fail("call target must be a function name", t)
                self.next()
                args = []
                if not self.at(")"):
                    while True:
                        args.append(self.parse_expr())
                        if self.at(","):
                            self.next()
                            continue
                        break
                end = self.expect(")")
                e = Expr("call", (e.span[0], end.pos + 1), text=e.text, kids=args)
            elif t.text in ("++", "--"):
                self.next()
                e = Expr("un", (e.span[0], t.pos + len(t.text)), op=t.text + "post", kids=[e])
            elif t.text == ".":
                self.reject_construct("struct member access", t)
            else:
                break
        return e

    def parse_primary(self) -> Expr:
        t = self.peek()
        if t.kind == "name":
            self.next()
            return Expr("name", (t.pos, t.pos + len(t.text)), text=t.text)
        if t.kind in ("num", "str", "char"):
            self.next()
            return Expr(t.kind, (t.pos, t.pos + len(t.text)), text=t.text)
        if t.kind == "punct" and t.text == "(":
            self.next()
            e = self.parse_expr()
            self.expect(")")
            return e
        self.fail(f"unexpected token {t.text!r}")


def _infer_index_var(node: Stmt) -> str:
    """Loop counter name, taken from init, then step, then condition."""
    init = node.for_init
    if init is not None:
        if init.kind == "decl" and init.decls:
            return init.decls[0].name
        if init.expr is not None and init.expr.kind == "assign":
            target = init.expr.kids[0]
            if target.kind == "name":
                return target.text
    if node.step is not None:
        for e in node.step.walk():
            if e.kind == "un" and e.op in ("++pre", "++post", "--pre", "--post"):
                if e.kids[0].kind == "name":
                    return e.kids[0].text
            if e.kind == "assign" and e.kids[0].kind == "name":
                return e.kids[0].text
    if node.cond is not None:
        for e in node.cond.walk():
            if e.kind == "name":
                return e.text
    return ""


def parse_source(source_text: str, file_id: str) -> SourceUnit:
    """Parse one translation unit of the supported C subset."""
    return _Parser(source_text, file_id).parse_unit()


# ---------------------------------------------------------------------------
# Loop table
# ---------------------------------------------------------------------------

class LoopShape(Enum):
    SINGLE = "single"
    TIGHT_OUTER = "tight_outer"
    TIGHT_INNER = "tight_inner"
    NON_TIGHT = "non_tight"


@dataclass
class LoopInfo:
    loop_id: int
    file_id: str
    span: tuple[int, int]
    depth: int
    parent_loop: Optional[int]
    index_var: str
    trip_count_estimate: Optional[int]
    shape: LoopShape
    stmt: Optional[Stmt] = field(default=None, repr=False, compare=False)


@dataclass
class LoopTable:
    loops: list[LoopInfo] = field(default_factory=list)

    def __post_init__(self):
        self.by_id = {l.loop_id: l for l in self.loops}

    def __len__(self) -> int:
        return len(self.loops)

    def __iter__(self):
        return iter(self.loops)

    def get(self, loop_id: int) -> LoopInfo:
        return self.by_id[loop_id]

    def ancestors(self, loop_id: int) -> list[int]:
        """Chain of enclosing loop ids from self outward (self first)."""
        chain = []
        cur: Optional[int] = loop_id
        while cur is not None:
            chain.append(cur)
            cur = self.by_id[cur].parent_loop
        return chain

    def top_level(self) -> list[LoopInfo]:
        return [l for l in self.loops if l.parent_loop is None]


def _estimate_trip_count(node: Stmt) -> Optional[int]:
    """Constant trip count for the canonical i = a; i < b; i++ pattern."""
    init = node.for_init
    start = None
    if init is not None:
        e = None
        if init.kind == "decl" and init.decls and init.decls[0].init is not None:
            e = init.decls[0].init
        elif init.expr is not None and init.expr.kind == "assign" and init.expr.op == "=":
            e = init.expr.kids[1]
        if e is not None and e.kind == "num" and not any(c in e.text for c in ".eE"):
            start = int(e.text.rstrip("uUlL"))
    if start is None or node.cond is None or node.cond.kind != "bin":
        return None
    cond = node.cond
    if cond.op not in ("<", "<=") or cond.kids[1].kind != "num":
        return None
    if any(c in cond.kids[1].text for c in ".eE"):
        return None
    bound = int(cond.kids[1].text.rstrip("uUlL"))
    count = bound - start + (1 if cond.op == "<=" else 0)
    return count if count > 0 else None


def extract_loops(units) -> LoopTable:
    """One LoopInfo per for statement, ids in document order across units."""
    if isinstance(units, SourceUnit):
        units = [units]
    loops: list[LoopInfo] = []
    node_id: dict[int, int] = {}  # id(stmt) -> loop_id

    def visit(stmt: Stmt, unit: SourceUnit, parent: Optional[int], depth: int) -> None:
        if stmt.kind == "for":
            lid = len(loops)
            node_id[id(stmt)] = lid
            loops.append(LoopInfo(lid, unit.file_id, stmt.span, depth, parent,
                                  stmt.index_var or "", _estimate_trip_count(stmt),
                                  LoopShape.SINGLE, stmt=stmt))
            parent, depth = lid, depth + 1
        for child in list(stmt.children) + list(stmt.else_children):
            visit(child, unit, parent, depth)

    for unit in units:
        for st in unit.statements:
            visit(st, unit, None, 0)

    table = LoopTable(loops)
    for info in loops:
        info.shape = _classify_shape(info, table)
    return table


def _classify_shape(info: LoopInfo, table: LoopTable) -> LoopShape:
    body = info.stmt.body()
    if len(body) == 1 and body[0].kind == "for":
        return LoopShape.TIGHT_OUTER
    parent = info.parent_loop
    if parent is not None:
        pbody = table.get(parent).stmt.body()
        if len(pbody) == 1 and pbody[0] is info.stmt:
            return LoopShape.TIGHT_INNER
    if any(s.kind == "for" for st in body for s in st.walk()):
        return LoopShape.NON_TIGHT
    return LoopShape.SINGLE


# ---------------------------------------------------------------------------
# Variable reference table
# ---------------------------------------------------------------------------

@dataclass
class RefFlags:
    read: bool = False
    written: bool = False
    defined: bool = False

    def merge(self, read=False, written=False, defined=False) -> None:
        self.read = self.read or read
        self.written = self.written or written
        self.defined = self.defined or defined


@dataclass
class VarEntry:
    key: str                     # unique project key ("g" or "func:name")
    name: str                    # source-level name used in clauses
    scope: str                   # global | local | loop-local
    extents: Optional[list[int]]  # None unknown, [] scalar, [n,...] array
    refs: dict[Region, RefFlags] = field(default_factory=dict)
    subscripted: bool = False
    decl_file: Optional[str] = None
    decl_span: Optional[tuple[int, int]] = None

    def at(self, region: Region) -> RefFlags:
        if region not in self.refs:
            self.refs[region] = RefFlags()
        return self.refs[region]


@dataclass
class VarRefTable:
    vars: dict[str, VarEntry] = field(default_factory=dict)
    region_sequence: list[Region] = field(default_factory=list)
    index_var_keys: set[str] = field(default_factory=set)

    def order(self, region: Region) -> int:
        return self._order[region]

    def finalize(self) -> None:
        self._order = {r: i for i, r in enumerate(self.region_sequence)}

    def plannable(self) -> list[VarEntry]:
        """Variables that may receive transfer decisions."""
        return [v for v in self.vars.values()
                if v.scope != "loop-local" and v.key not in self.index_var_keys]


class _RefAnalyzer:
    def __init__(self, units: list[SourceUnit], loops: LoopTable):
        self.units = units
        self.loops = loops
        self.table = VarRefTable()
        self.loop_of_stmt = {id(l.stmt): l.loop_id for l in loops}
        top = loops.top_level()
        self.top_spans = [(l.span, l.loop_id, l.file_id) for l in top]

    def run(self) -> VarRefTable:
        self._build_sequence()
        for unit in self.units:
            for d in unit.top_level_decls:
                key = d.name
                entry = self._entry(key, d.name, "global", d)
                entry.at("pre").merge(defined=True, written=d.init is not None)
                if d.init is not None:
                    self._scan_expr(d.init, "pre", {}, unit)
        for unit in self.units:
            for st in unit.statements:
                if st.kind == "function" and st.children:
                    self._scan_function(st, unit)
        self.table.finalize()
        return self.table

    def _build_sequence(self) -> None:
        # interleave host segments and loops in document order, per file order
        seq: list[Region] = ["pre"]
        ordered = sorted(self.loops, key=lambda l: (self._file_rank(l.file_id), l.span[0]))
        top_seen = 0
        for l in ordered:
            if l.parent_loop is None and top_seen:
                seq.append(f"host:{top_seen}")
            if l.parent_loop is None:
                top_seen += 1
            seq.append(l.loop_id)
        seq.append("post")
        self.table.region_sequence = seq
        self.table.index_var_keys = set()

    def _file_rank(self, file_id: str) -> int:
        for i, u in enumerate(self.units):
            if u.file_id == file_id:
                return i
        return len(self.units)

    def _entry(self, key: str, name: str, scope: str, decl: Optional[Decl]) -> VarEntry:
        if key not in self.table.vars:
            self.table.vars[key] = VarEntry(key, name, scope, None)
        e = self.table.vars[key]
        if decl is not None:
            e.extents = list(decl.extents)
        return e

    def _host_region(self, stmt_start: int, file_id: str) -> Region:
        """Host segment containing a statement outside every loop."""
        rank = self._file_rank(file_id)
        n_before = 0
        for span, lid, fid in self.top_spans:
            if (self._file_rank(fid), span[0]) < (rank, stmt_start):
                n_before += 1
        if n_before == 0:
            return "pre"
        if n_before == len(self.top_spans):
            return "post"
        return f"host:{n_before}"

    def _scan_function(self, fn: Stmt, unit: SourceUnit) -> None:
        scope_map: dict[str, str] = {}  # name -> key
        for p in fn.decls:
            key = f"{fn.name}:{p.name}"
            scope_map[p.name] = key
            e = self._entry(key, p.name, "local", p)
            e.at("pre").merge(defined=True, written=True)

        def region_for(stmt: Stmt, loop_ctx: Optional[int]) -> Region:
            if loop_ctx is not None:
                return loop_ctx
            return self._host_region(stmt.span[0], unit.file_id)

        def scan(stmt: Stmt, loop_ctx: Optional[int], in_loop: bool) -> None:
            lid = self.loop_of_stmt.get(id(stmt))
            if lid is not None:
                loop = self.loops.get(lid)
                if loop.index_var:
                    key = scope_map.get(loop.index_var, loop.index_var)
                    self.table.index_var_keys.add(key)
                loop_ctx, in_loop = lid, True
                if stmt.for_init is not None:
                    handle_leaf(stmt.for_init, loop_ctx, in_loop)
                for e in (stmt.cond, stmt.step):
                    if e is not None:
                        self._scan_expr(e, loop_ctx, scope_map, unit)
                for c in stmt.children:
                    scan(c, loop_ctx, in_loop)
                return
            handle_leaf(stmt, loop_ctx, in_loop)
            for c in list(stmt.children) + list(stmt.else_children):
                scan(c, loop_ctx, in_loop)

        def handle_leaf(stmt: Stmt, loop_ctx: Optional[int], in_loop: bool) -> None:
            region = region_for(stmt, loop_ctx)
            for d in stmt.decls:
                key = f"{fn.name}:{d.name}"
                if in_loop:
                    key = f"{fn.name}:{d.name}@{d.span[0]}"
                scope_map[d.name] = key
                e = self._entry(key, d.name, "loop-local" if in_loop else "local", d)
                e.decl_file = unit.file_id
                e.decl_span = d.span
                e.at(region).merge(defined=True, written=d.init is not None)
            for e in stmt.exprs():
                self._scan_expr(e, region, scope_map, unit)

        body = fn.children[0]
        for st in body.children:
            scan(st, None, False)
        # record declaration sites for globals once per unit
        for d in unit.top_level_decls:
            entry = self.table.vars.get(d.name)
            if entry is not None and entry.decl_span is None:
                entry.decl_file = unit.file_id
                entry.decl_span = d.span

    def _resolve(self, name: str, scope_map: dict[str, str]) -> VarEntry:
        key = scope_map.get(name, name)
        if key not in self.table.vars:
            # referenced before any visible declaration: assume external global
            self.table.vars[key] = VarEntry(key, name, "global", None)
        return self.table.vars[key]

    def _scan_expr(self, expr: Expr, region: Region, scope_map: dict[str, str],
                   unit: SourceUnit) -> None:
        def read(e: Expr) -> None:
            if e.kind == "name":
                self._resolve(e.text, scope_map).at(region).merge(read=True)
            elif e.kind == "index":
                base = e.kids[0]
                entry = self._resolve(base.text, scope_map)
                entry.subscripted = True
                entry.at(region).merge(read=True)
                for sub in e.kids[1:]:
                    read(sub)
            elif e.kind == "assign":
                write_target(e.kids[0], e.op != "=")
                read(e.kids[1])
            elif e.kind == "un" and e.op in ("++pre", "++post", "--pre", "--post"):
                write_target(e.kids[0], True)
            elif e.kind == "call":
                self._scan_call(e, region, scope_map, read)
            else:
                for k in e.kids:
                    read(k)

        def write_target(t: Expr, also_read: bool) -> None:
            if t.kind == "name":
                f = self._resolve(t.text, scope_map).at(region)
                f.merge(written=True, read=also_read)
            elif t.kind == "index":
                entry = self._resolve(t.kids[0].text, scope_map)
                entry.subscripted = True
                entry.at(region).merge(written=True, read=also_read)
                for sub in t.kids[1:]:
                    read(sub)

        read(expr)

    def _scan_call(self, e: Expr, region: Region, scope_map, read_fn) -> None:
        fn = e.text
        readonly = fn in READONLY_FUNCS or fn in MATH_FUNCS
        for arg in e.kids:
            read_fn(arg)
            if not readonly and arg.kind == "name":
                entry = self._resolve(arg.text, scope_map)
                if entry.subscripted or (entry.extents is not None and entry.extents):
                    # array handed to a call with unknown effect: assume mutation
                    entry.at(region).merge(read=True, written=True)


def analyze_variable_refs(units, loops: LoopTable) -> VarRefTable:
    """Per-(variable, region) read/write/defined facts for transfer planning."""
    if isinstance(units, SourceUnit):
        units = [units]
    return _RefAnalyzer(units, loops).run()


# ---------------------------------------------------------------------------
# Project container and structural JSON
# ---------------------------------------------------------------------------

@dataclass
class ProjectModel:
    units: list[SourceUnit]
    loops: LoopTable
    refs: VarRefTable

    @property
    def has_sources(self) -> bool:
        return bool(self.units)


def analyze_project(files: list[tuple[str, str]]) -> ProjectModel:
    """Parse and analyze (file_id, text) pairs into a full project model."""
    units = [parse_source(text, file_id) for file_id, text in files]
    loops = extract_loops(units)
    refs = analyze_variable_refs(units, loops)
    return ProjectModel(units, loops, refs)


def _region_to_json(region: Region):
    return region


def _region_from_json(value) -> Region:
    if isinstance(value, int):
        return value
    if isinstance(value, str) and (value in ("pre", "post") or value.startswith("host:")):
        return value
    raise ValueError(f"bad region value: {value!r}")


def dump_structural(model: ProjectModel) -> dict:
    """Canonical structural-description document for the project."""
    files: dict[str, dict] = {}
    order = [u.file_id for u in model.units] or sorted({l.file_id for l in model.loops})
    for fid in order:
        files[fid] = {"file_id": fid, "loops": [], "vars": []}
    for l in model.loops:
        files.setdefault(l.file_id, {"file_id": l.file_id, "loops": [], "vars": []})
        files[l.file_id]["loops"].append({
            "loop_id": l.loop_id,
            "span": list(l.span),
            "parent": l.parent_loop,
            "shape": l.shape.value,
            "index_var": l.index_var,
            "trip_count": l.trip_count_estimate,
        })
    by_file = files or {"<model>": {"file_id": "<model>", "loops": [], "vars": []}}
    default_fid = next(iter(by_file))
    for v in model.refs.vars.values():
        fid = v.decl_file if v.decl_file in by_file else default_fid
        entry = {
            "name": v.key,
            "scope": v.scope,
            "refs": [{"region": _region_to_json(r), "read": f.read,
                      "written": f.written, "defined": f.defined}
                     for r, f in sorted(v.refs.items(),
                                        key=lambda kv: model.refs.order(kv[0]))],
        }
        if v.extents is not None:
            entry["extent"] = list(v.extents)
        by_file[fid]["vars"].append(entry)
    return {"files": [by_file[f] for f in by_file]}


def load_structural(doc: dict) -> ProjectModel:
    """Load a structural description produced by dump_structural or by hand."""
    loops: list[LoopInfo] = []
    table = VarRefTable()
    for f in doc["files"]:
        fid = f["file_id"]
        for l in f.get("loops", []):
            loops.append(LoopInfo(
                loop_id=int(l["loop_id"]),
                file_id=fid,
                span=tuple(l.get("span", [0, 0])),
                depth=0,
                parent_loop=l.get("parent"),
                index_var=l.get("index_var", ""),
                trip_count_estimate=l.get("trip_count"),
                shape=LoopShape(l.get("shape", "single")),
            ))
    loops.sort(key=lambda l: l.loop_id)
    loop_table = LoopTable(loops)
    for l in loops:
        depth = 0
        cur = l.parent_loop
        while cur is not None:
            depth += 1
            cur = loop_table.get(cur).parent_loop
        l.depth = depth

    for f in doc["files"]:
        for v in f.get("vars", []):
            key = v["name"]
            name = key.split(":", 1)[1] if ":" in key else key
            name = name.split("@", 1)[0]
            entry = VarEntry(key, name, v.get("scope", "global"),
                             list(v["extent"]) if "extent" in v else None)
            entry.decl_file = f["file_id"]
            if entry.extents:
                entry.subscripted = True
            for r in v.get("refs", []):
                flags = entry.at(_region_from_json(r["region"]))
                flags.merge(read=bool(r.get("read")), written=bool(r.get("written")),
                            defined=bool(r.get("defined")))
            table.vars[key] = entry

    file_rank = {f["file_id"]: i for i, f in enumerate(doc["files"])}
    seq: list[Region] = ["pre"]
    top_seen = 0
    for l in sorted(loops, key=lambda l: (file_rank.get(l.file_id, 0), l.span[0], l.loop_id)):
        if l.parent_loop is None and top_seen:
            seq.append(f"host:{top_seen}")
        if l.parent_loop is None:
            top_seen += 1
        seq.append(l.loop_id)
    seq.append("post")
    table.region_sequence = seq
    table.index_var_keys = {l.index_var for l in loops if l.index_var
                            and l.index_var in table.vars}
    table.finalize()
    return ProjectModel([], loop_table, table)


def load_structural_text(text: str) -> ProjectModel:
    return load_structural(json.loads(text))
