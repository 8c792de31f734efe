#pragma once

#include <cctype>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "codelkt/common.hpp"

namespace codelkt {

enum class SourceLanguage { java };

inline SourceLanguage parse_source_language(const std::string& s) {
    std::string lower;
    for (char c : s) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (lower == "java") return SourceLanguage::java;
    throw Error(ErrorKind::validation, "unsupported language '" + s + "'");
}

inline constexpr std::string_view kAstUnavailable = "AST_UNAVAILABLE(parse_error)";

namespace java {

struct Token {
    enum Kind { ident, keyword, literal, op, end } kind = end;
    std::string text;
};

class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline const std::set<std::string>& keywords() {
    static const std::set<std::string> k{
        "abstract", "boolean", "break",     "byte",       "case",   "catch",    "char",         "class",
        "continue", "default", "do",        "double",     "else",   "extends",  "final",        "finally",
        "float",    "for",     "if",        "implements", "import", "instanceof", "int",        "interface",
        "long",     "new",     "package",   "private",    "protected", "public", "return",      "short",
        "static",   "super",   "switch",    "synchronized", "this", "throw",    "throws",       "try",
        "void",     "while",   "true",      "false",      "null",   "var"};
    return k;
}

inline std::vector<Token> lex(std::string_view src) {
    static const std::vector<std::string> ops{">>>=", "<<=", ">>=", ">>>", "...", "->", "::", "++", "--", "&&", "||",
                                              "==",   "!=",  "<=",  ">=",  "+=",  "-=", "*=", "/=", "%=", "&=", "|=",
                                              "^=",   "<<",  ">>"};
    std::vector<Token> out;
    std::size_t i = 0;
    const auto n = src.size();
    while (i < n) {
        const char c = src[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
        } else if (src.substr(i, 2) == "//") {
            while (i < n && src[i] != '\n') ++i;
        } else if (src.substr(i, 2) == "/*") {
            const auto e = src.find("*/", i + 2);
            if (e == std::string_view::npos) throw ParseError("unterminated comment");
            i = e + 2;
        } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '$') {
            std::size_t j = i;
            while (j < n && (std::isalnum(static_cast<unsigned char>(src[j])) || src[j] == '_' || src[j] == '$')) ++j;
            std::string w(src.substr(i, j - i));
            out.push_back({keywords().count(w) ? Token::keyword : Token::ident, w});
            i = j;
        } else if (std::isdigit(static_cast<unsigned char>(c)) ||
                   (c == '.' && i + 1 < n && std::isdigit(static_cast<unsigned char>(src[i + 1])))) {
            std::size_t j = i;
            while (j < n && (std::isalnum(static_cast<unsigned char>(src[j])) || src[j] == '.' || src[j] == '_' ||
                             ((src[j] == '+' || src[j] == '-') && (src[j - 1] == 'e' || src[j - 1] == 'E')))) {
                ++j;
            }
            out.push_back({Token::literal, std::string(src.substr(i, j - i))});
            i = j;
        } else if (c == '"' || c == '\'') {
            std::size_t j = i + 1;
            while (j < n && src[j] != c) {
                if (src[j] == '\n') throw ParseError("newline in literal");
                j += src[j] == '\\' ? 2 : 1;
            }
            if (j >= n) throw ParseError("unterminated literal");
            out.push_back({Token::literal, std::string(src.substr(i, j - i + 1))});
            i = j + 1;
        } else {
            std::string matched;
            for (const auto& o : ops) {
                if (src.substr(i, o.size()) == o) {
                    matched = o;
                    break;
                }
            }
            if (matched.empty()) {
                if (std::string_view("{}()[];,.=<>!~?:+-*/&|^%@").find(c) == std::string_view::npos) {
                    throw ParseError(std::string("unexpected character '") + c + "'");
                }
                matched = std::string(1, c);
            }
            out.push_back({Token::op, matched});
            i += matched.size();
        }
    }
    out.push_back({Token::end, ""});
    return out;
}

struct Node {
    std::string label;
    std::string value;
    std::vector<Node> children;

    Node() = default;
    Node(std::string l, std::string v = {}, std::vector<Node> c = {})
        : label(std::move(l)), value(std::move(v)), children(std::move(c)) {}

    void serialize(std::string& out) const {
        out += '(';
        out += label;
        if (!value.empty()) {
            out += ' ';
            out += value;
        }
        for (const auto& ch : children) {
            out += ' ';
            ch.serialize(out);
        }
        out += ')';
    }
};

class Parser {
public:
    explicit Parser(std::vector<Token> toks) : t_(std::move(toks)) {}

    Node compilation_unit() {
        Node root("CompilationUnit");
        const auto start = p_;
        try {
            while (!at_end()) root.children.push_back(statement());
            return root;
        } catch (const ParseError&) {
            p_ = start;
            root.children.clear();
        }
        while (!at_end()) root.children.push_back(member());
        return root;
    }

private:
    // -- token helpers -----------------------------------------------------
    const Token& peek(std::size_t k = 0) const { return t_[std::min(p_ + k, t_.size() - 1)]; }
    bool at_end() const { return peek().kind == Token::end; }
    bool is(std::string_view s, std::size_t k = 0) const {
        const auto& t = peek(k);
        return t.kind != Token::literal && t.kind != Token::end && t.text == s;
    }
    bool accept(std::string_view s) {
        if (!is(s)) return false;
        ++p_;
        return true;
    }
    void expect(std::string_view s) {
        if (!accept(s)) throw ParseError("expected '" + std::string(s) + "' near '" + peek().text + "'");
    }
    std::string identifier() {
        if (peek().kind != Token::ident) throw ParseError("expected identifier near '" + peek().text + "'");
        return t_[p_++].text;
    }
    static bool primitive(const std::string& s) {
        static const std::set<std::string> p{"int", "long", "short", "byte", "char", "boolean", "double", "float", "void", "var"};
        return p.count(s) > 0;
    }
    static bool modifier(const std::string& s) {
        static const std::set<std::string> m{"public", "private", "protected", "static", "final", "abstract", "synchronized"};
        return m.count(s) > 0;
    }

    template <typename F>
    auto attempt(F&& f) -> std::optional<decltype(f())> {
        const auto save = p_;
        const auto edits = edits_.size();
        try {
            return f();
        } catch (const ParseError&) {
            p_ = save;
            while (edits_.size() > edits) {
                t_[edits_.back().first].text = edits_.back().second;
                edits_.pop_back();
            }
            return std::nullopt;
        }
    }

    // -- declarations --------------------------------------------------------
    std::string modifiers() {
        std::string m;
        while (peek().kind == Token::keyword && modifier(peek().text)) {
            if (!m.empty()) m += ' ';
            m += t_[p_++].text;
        }
        while (is("@")) {
            ++p_;
            identifier();
        }
        return m;
    }

    Node member() {
        if (accept("import") || accept("package")) {
            std::string name = identifier();
            while (accept(".")) name += "." + (accept("*") ? std::string("*") : identifier());
            expect(";");
            return Node("Import", name);
        }
        const auto mods = modifiers();
        if (accept("class") || accept("interface")) {
            Node cls("ClassDeclaration", identifier());
            if (!mods.empty()) cls.children.emplace_back("Modifiers", mods);
            if (accept("extends")) cls.children.emplace_back("Extends", "", std::vector<Node>{type()});
            if (accept("implements")) {
                Node impl("Implements");
                do impl.children.push_back(type());
                while (accept(","));
                cls.children.push_back(std::move(impl));
            }
            expect("{");
            while (!accept("}")) {
                if (at_end()) throw ParseError("unterminated class body");
                if (accept(";")) continue;
                cls.children.push_back(member());
            }
            return cls;
        }
        Node ty = type();
        if (is("(")) throw ParseError("constructors are not supported");
        std::string name = identifier();
        if (is("(")) {
            Node m("MethodDeclaration", name);
            if (!mods.empty()) m.children.emplace_back("Modifiers", mods);
            m.children.push_back(ty);
            expect("(");
            if (!is(")")) {
                do {
                    modifiers();
                    Node pt = type();
                    if (accept("...")) pt.value += "...";
                    m.children.emplace_back("Parameter", identifier(), std::vector<Node>{pt});
                } while (accept(","));
            }
            expect(")");
            if (accept("throws")) {
                Node th("Throws");
                do th.children.push_back(type());
                while (accept(","));
                m.children.push_back(std::move(th));
            }
            if (accept(";")) return m;
            m.children.push_back(block());
            return m;
        }
        Node f("FieldDeclaration");
        if (!mods.empty()) f.children.emplace_back("Modifiers", mods);
        f.children.push_back(ty);
        f.children.push_back(declarator_rest(std::move(name)));
        while (accept(",")) f.children.push_back(declarator_rest(identifier()));
        expect(";");
        return f;
    }

    Node type() {
        std::string name;
        if (peek().kind == Token::keyword && primitive(peek().text)) {
            name = t_[p_++].text;
        } else {
            name = identifier();
            while (is(".") && peek(1).kind == Token::ident) {
                ++p_;
                name += "." + identifier();
            }
        }
        Node ty("Type", name);
        if (accept("<")) {
            if (!is(">")) {
                do {
                    if (accept("?")) {
                        Node w("Wildcard");
                        if (accept("extends") || accept("super")) w.children.push_back(type());
                        ty.children.push_back(std::move(w));
                    } else {
                        ty.children.push_back(type());
                    }
                } while (accept(","));
            }
            close_angle();
        }
        while (is("[") && is("]", 1)) {
            p_ += 2;
            ty.value += "[]";
        }
        return ty;
    }

    // Splits '>>' and '>>>' when they close nested type arguments.
    void close_angle() {
        if (accept(">")) return;
        auto& t = t_[p_];
        if (t.kind == Token::op && (t.text == ">>" || t.text == ">>>")) {
            edits_.emplace_back(p_, t.text);
            t.text = t.text.substr(1);
            return;
        }
        throw ParseError("expected '>'");
    }

    Node declarator_rest(std::string name) {
        Node d("VariableDeclarator", std::move(name));
        while (is("[") && is("]", 1)) {
            p_ += 2;
            d.value += "[]";
        }
        if (accept("=")) d.children.push_back(is("{") ? array_initializer() : expression());
        return d;
    }

    Node array_initializer() {
        expect("{");
        Node a("ArrayInitializer");
        while (!accept("}")) {
            a.children.push_back(is("{") ? array_initializer() : expression());
            if (!is("}")) expect(",");
        }
        return a;
    }

    // -- statements ----------------------------------------------------------
    Node block() {
        expect("{");
        Node b("Block");
        while (!accept("}")) {
            if (at_end()) throw ParseError("unterminated block");
            b.children.push_back(statement());
        }
        return b;
    }

    std::optional<Node> local_variable_declaration() {
        return attempt([&] {
            modifiers();
            Node ty = type();
            if (peek().kind != Token::ident) throw ParseError("not a declaration");
            Node decl("LocalVariableDeclaration", "", {ty});
            decl.children.push_back(declarator_rest(identifier()));
            while (accept(",")) decl.children.push_back(declarator_rest(identifier()));
            return decl;
        });
    }

    Node statement() {
        if (is("{")) return block();
        if (accept(";")) return Node("EmptyStatement");
        if (accept("if")) {
            Node s("IfStatement", "", {paren_expression(), statement()});
            if (accept("else")) s.children.push_back(statement());
            return s;
        }
        if (accept("while")) return Node("WhileStatement", "", {paren_expression(), statement()});
        if (accept("do")) {
            Node body = statement();
            expect("while");
            Node s("DoStatement", "", {std::move(body), paren_expression()});
            expect(";");
            return s;
        }
        if (accept("for")) return for_statement();
        if (accept("return")) {
            Node s("ReturnStatement");
            if (!is(";")) s.children.push_back(expression());
            expect(";");
            return s;
        }
        if (accept("break") || accept("continue")) {
            Node s(t_[p_ - 1].text == "break" ? "BreakStatement" : "ContinueStatement");
            if (peek().kind == Token::ident) s.value = identifier();
            expect(";");
            return s;
        }
        if (accept("throw")) {
            Node s("ThrowStatement", "", {expression()});
            expect(";");
            return s;
        }
        if (accept("switch")) return switch_statement();
        if (accept("try")) return try_statement();
        if (peek().kind == Token::ident && is(":", 1)) {
            std::string label = identifier();
            expect(":");
            return Node("LabeledStatement", label, {statement()});
        }
        if (auto decl = local_variable_declaration(); decl && is(";")) {
            ++p_;
            return *decl;
        }
        Node s("ExpressionStatement", "", {expression()});
        expect(";");
        return s;
    }

    Node paren_expression() {
        expect("(");
        Node e = expression();
        expect(")");
        return e;
    }

    Node for_statement() {
        expect("(");
        const auto save = p_;
        auto each = attempt([&] {
            modifiers();
            Node ty = type();
            std::string name = identifier();
            expect(":");
            return Node("Parameter", name, {ty});
        });
        if (each) {
            Node s("ForEachStatement", "", {*each, expression()});
            expect(")");
            s.children.push_back(statement());
            return s;
        }
        p_ = save;
        Node init("ForInit");
        if (!is(";")) {
            if (auto decl = local_variable_declaration(); decl && is(";")) {
                init.children.push_back(*decl);
            } else {
                do init.children.push_back(expression());
                while (accept(","));
            }
        }
        expect(";");
        Node cond("ForCondition");
        if (!is(";")) cond.children.push_back(expression());
        expect(";");
        Node update("ForUpdate");
        if (!is(")")) {
            do update.children.push_back(expression());
            while (accept(","));
        }
        expect(")");
        return Node("ForStatement", "", {init, cond, update, statement()});
    }

    Node switch_statement() {
        Node s("SwitchStatement", "", {paren_expression()});
        expect("{");
        while (!accept("}")) {
            Node c("SwitchCase");
            if (accept("default")) {
                c.value = "default";
            } else {
                expect("case");
                c.children.push_back(expression());
            }
            if (!accept(":")) expect("->");
            while (!is("case") && !is("default") && !is("}")) {
                if (at_end()) throw ParseError("unterminated switch");
                c.children.push_back(statement());
            }
            s.children.push_back(std::move(c));
        }
        return s;
    }

    Node try_statement() {
        Node s("TryStatement", "", {block()});
        while (accept("catch")) {
            expect("(");
            modifiers();
            Node ty = type();
            while (accept("|")) ty.value += "|" + type().value;
            std::string name = identifier();
            expect(")");
            s.children.emplace_back("CatchClause", name, std::vector<Node>{ty, block()});
        }
        if (accept("finally")) s.children.emplace_back("FinallyClause", "", std::vector<Node>{block()});
        if (s.children.size() == 1) throw ParseError("try without catch or finally");
        return s;
    }

    // -- expressions ---------------------------------------------------------
    Node expression() {
        Node lhs = conditional();
        static const std::set<std::string> assign{"=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<=", ">>=", ">>>="};
        if (peek().kind == Token::op && assign.count(peek().text)) {
            std::string op = t_[p_++].text;
            Node rhs = is("{") ? array_initializer() : expression();
            return Node("Assignment", op, {std::move(lhs), std::move(rhs)});
        }
        return lhs;
    }

    Node conditional() {
        Node c = binary(0);
        if (accept("?")) {
            Node a = expression();
            expect(":");
            Node b = conditional();
            return Node("Conditional", "", {std::move(c), std::move(a), std::move(b)});
        }
        return c;
    }

    static int precedence(const std::string& op) {
        if (op == "||") return 1;
        if (op == "&&") return 2;
        if (op == "|") return 3;
        if (op == "^") return 4;
        if (op == "&") return 5;
        if (op == "==" || op == "!=") return 6;
        if (op == "<" || op == ">" || op == "<=" || op == ">=" || op == "instanceof") return 7;
        if (op == "<<" || op == ">>" || op == ">>>") return 8;
        if (op == "+" || op == "-") return 9;
        if (op == "*" || op == "/" || op == "%") return 10;
        return 0;
    }

    Node binary(int min_prec) {
        Node lhs = unary();
        for (;;) {
            const auto& t = peek();
            if (t.kind != Token::op && !(t.kind == Token::keyword && t.text == "instanceof")) break;
            const int prec = precedence(t.text);
            if (prec == 0 || prec <= min_prec) break;
            std::string op = t_[p_++].text;
            if (op == "instanceof") {
                lhs = Node("InstanceOf", "", {std::move(lhs), type()});
                continue;
            }
            Node rhs = binary(prec);
            lhs = Node("BinaryOperation", op, {std::move(lhs), std::move(rhs)});
        }
        return lhs;
    }

    Node unary() {
        for (const char* op : {"++", "--", "+", "-", "!", "~"}) {
            if (accept(op)) return Node("UnaryOperation", op, {unary()});
        }
        if (is("(")) {
            auto cast = attempt([&] {
                expect("(");
                Node ty = type();
                expect(")");
                const bool prim = primitive(ty.value.substr(0, ty.value.find('[')));
                const auto& n = peek();
                const bool operand = n.kind == Token::ident || n.kind == Token::literal || is("(") || is("!") ||
                                     is("~") || is("this") || is("new") || is("true") || is("false") || is("null") ||
                                     (prim && (is("-") || is("+")));
                if (!operand) throw ParseError("not a cast");
                return Node("Cast", "", {ty, unary()});
            });
            if (cast) return *cast;
        }
        Node e = postfix(primary());
        while (is("++") || is("--")) e = Node("PostfixOperation", t_[p_++].text, {std::move(e)});
        return e;
    }

    Node arguments() {
        expect("(");
        Node a("Arguments");
        if (!is(")")) {
            do a.children.push_back(expression());
            while (accept(","));
        }
        expect(")");
        return a;
    }

    Node primary() {
        const auto& t = peek();
        if (t.kind == Token::literal) return Node("Literal", t_[p_++].text);
        if (is("true") || is("false") || is("null")) return Node("Literal", t_[p_++].text);
        if (accept("this")) return Node("This");
        if (accept("super")) return Node("Super");
        if (is("(")) {
            auto lambda = attempt([&] { return lambda_expression(); });
            if (lambda) return *lambda;
            return Node("Parenthesized", "", {paren_expression()});
        }
        if (accept("new")) return creation();
        if (t.kind == Token::ident) {
            if (is("->", 1)) return lambda_expression();
            std::string name = identifier();
            if (is("(")) return Node("MethodInvocation", name, {arguments()});
            return Node("Name", name);
        }
        if (t.kind == Token::keyword && primitive(t.text)) {
            Node ty = type();
            expect(".");
            expect("class");
            return Node("ClassLiteral", "", {ty});
        }
        throw ParseError("unexpected token '" + t.text + "'");
    }

    Node lambda_expression() {
        Node params("LambdaParameters");
        if (peek().kind == Token::ident) {
            params.children.emplace_back("Name", identifier());
        } else {
            expect("(");
            if (!is(")")) {
                do {
                    if (peek().kind == Token::ident && (is(",", 1) || is(")", 1))) {
                        params.children.emplace_back("Name", identifier());
                    } else {
                        Node ty = type();
                        params.children.emplace_back("Parameter", identifier(), std::vector<Node>{ty});
                    }
                } while (accept(","));
            }
            expect(")");
        }
        expect("->");
        return Node("Lambda", "", {params, is("{") ? block() : expression()});
    }

    Node creation() {
        Node ty("Type");
        if (peek().kind == Token::keyword && primitive(peek().text)) {
            ty.value = t_[p_++].text;
        } else {
            ty.value = identifier();
            while (accept(".")) ty.value += "." + identifier();
            if (accept("<")) {
                if (!is(">")) {
                    do ty.children.push_back(type());
                    while (accept(","));
                }
                close_angle();
            }
        }
        if (is("[")) {
            Node a("ArrayCreation", "", {ty});
            while (accept("[")) {
                if (accept("]")) {
                    a.value += "[]";
                } else {
                    a.children.push_back(Node("Dimension", "", {expression()}));
                    expect("]");
                }
            }
            if (is("{")) a.children.push_back(array_initializer());
            return a;
        }
        Node c("ObjectCreation", "", {ty, arguments()});
        if (is("{")) {
            Node body("ClassBody");
            expect("{");
            while (!accept("}")) {
                if (at_end()) throw ParseError("unterminated class body");
                body.children.push_back(member());
            }
            c.children.push_back(std::move(body));
        }
        return c;
    }

    Node postfix(Node e) {
        for (;;) {
            if (accept(".")) {
                if (accept("class")) {
                    e = Node("ClassLiteral", "", {std::move(e)});
                    continue;
                }
                if (accept("<")) {
                    while (!accept(">")) {
                        if (at_end()) throw ParseError("unterminated type arguments");
                        ++p_;
                    }
                }
                std::string name = is("this") ? (++p_, std::string("this")) : identifier();
                if (is("(")) {
                    e = Node("MethodInvocation", name, {std::move(e), arguments()});
                } else {
                    e = Node("FieldAccess", name, {std::move(e)});
                }
            } else if (is("[")) {
                ++p_;
                Node idx = expression();
                expect("]");
                e = Node("ArrayAccess", "", {std::move(e), std::move(idx)});
            } else if (accept("::")) {
                e = Node("MethodReference", is("new") ? (++p_, std::string("new")) : identifier(), {std::move(e)});
            } else {
                return e;
            }
        }
    }

    std::vector<Token> t_;
    std::size_t p_ = 0;
    // Token splits made by close_angle, undone when a speculative parse fails.
    std::vector<std::pair<std::size_t, std::string>> edits_;
};

}  // namespace java

/// Parenthesized node-labelled serialization of the code's syntax tree, or
/// kAstUnavailable when the code does not parse.
inline std::string extract_ast(std::string_view code, SourceLanguage language = SourceLanguage::java) {
    if (language != SourceLanguage::java) throw Error(ErrorKind::validation, "unsupported language");
    if (text::trim(code).empty()) return std::string(kAstUnavailable);
    try {
        java::Parser parser(java::lex(code));
        std::string out;
        parser.compilation_unit().serialize(out);
        return out;
    } catch (const java::ParseError&) {
        return std::string(kAstUnavailable);
    }
}

inline std::string extract_ast(std::string_view code, const std::string& language) {
    return extract_ast(code, parse_source_language(language));
}

}  // namespace codelkt
