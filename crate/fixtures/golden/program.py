import numpy as np
import matplotlib.pyplot as plt
from sklearn.model_selection import train_test_split
from sklearn.metrics import mean_squared_error
# Synthetic stand-in for the red wine quality data: 1599 samples, 11 features.
rng = np.random.default_rng(42)
X = rng.normal(size=(1599, 11))
true_coef = rng.normal(size=11)
y = X @ true_coef + 5.6 + rng.normal(scale=0.6, size=1599)
train_losses, test_losses = [], []
X_train, X_test, y_train, y_test = train_test_split(X, y, test_size=0.2, random_state=0)
from sklearn.linear_model import Ridge
model = Ridge(alpha=0.5)
for epoch in range(1, 31):
    n = max(2, len(X_train) * epoch // 30)
    model.fit(X_train[:n], y_train[:n])
    train_pred = model.predict(X_train[:n])
    test_pred = model.predict(X_test)
    train_losses.append(mean_squared_error(y_train[:n], train_pred))
    test_losses.append(mean_squared_error(y_test, test_pred))
    plt.figure()
    plt.plot(train_losses, label="train")
    plt.plot(test_losses, label="test")
    plt.xlabel("epoch")
    plt.ylabel("MSE")
    plt.legend()
    plt.title(f"Loss after epoch {epoch}")
    plt.savefig(f"loss_epoch_{epoch:02d}.png")
    plt.close()
